//! Deterministic 1-d quadrature helpers: adaptive Simpson bisection with an
//! optional record of the accepted panels, and a change of variables for
//! integrals over `[a, ∞)`.

use crate::error::{Error, Result};

const MAX_DEPTH: usize = 60;

/// Adaptive Simpson integration of `f` on `[a, b]` to relative tolerance
/// `rel_tol` (with `abs_floor` guarding near-zero integrals).
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, rel_tol: f64, abs_floor: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let mut panels = NoRecord;
    adaptive_core(&f, a, b, rel_tol, abs_floor, &mut panels)
}

/// Same as [`adaptive_simpson`] but also returns the accepted panels as
/// `(node, weight)` pairs, so the caller can re-use the quadrature rule.
/// Nodes are sorted by position; weights sum to `b - a`.
pub fn adaptive_simpson_nodes<F>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<(f64, Vec<(f64, f64)>)>
where
    F: Fn(f64) -> f64,
{
    let mut panels = Record(Vec::new());
    let value = adaptive_core(&f, a, b, rel_tol, abs_floor, &mut panels)?;
    let mut nodes = match panels {
        Record(v) => v,
        NoRecord => unreachable!(),
    };
    nodes.sort_by(|x, y| x.0.total_cmp(&y.0));
    // merge duplicate endpoints shared by adjacent panels
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(nodes.len());
    for (x, w) in nodes {
        match merged.last_mut() {
            Some(last) if last.0 == x => last.1 += w,
            _ => merged.push((x, w)),
        }
    }
    Ok((value, merged))
}

/// Integrate `f` on `[a, ∞)` by splitting at `split` and mapping the tail
/// through `r = 1/t`. The integrand must decay at least like `r^{-2}`.
pub fn adaptive_simpson_to_infinity<F>(
    f: F,
    a: f64,
    split: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let split = split.max(a);
    let head = if split > a {
        adaptive_simpson(&f, a, split, rel_tol, abs_floor)?
    } else {
        0.0
    };
    // r = 1/t, dr = dt/t^2 maps [split, inf) to (0, 1/split]
    let tail = adaptive_simpson(
        |t| {
            if t <= 0.0 {
                0.0
            } else {
                let r = 1.0 / t;
                f(r) * r * r
            }
        },
        0.0,
        1.0 / split,
        rel_tol,
        abs_floor,
    )?;
    Ok(head + tail)
}

enum PanelSink {
    NoRecord,
    Record(Vec<(f64, f64)>),
}
use PanelSink::{NoRecord, Record};

impl PanelSink {
    fn push(&mut self, a: f64, m: f64, b: f64) {
        if let Record(v) = self {
            let h6 = (b - a) / 6.0;
            v.push((a, h6));
            v.push((m, 4.0 * h6));
            v.push((b, h6));
        }
    }
}

fn adaptive_core<F>(
    f: &F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_floor: f64,
    panels: &mut PanelSink,
) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if !(a.is_finite() && b.is_finite()) || b < a {
        return Err(Error::Invalid(format!("bad quadrature interval [{a}, {b}]")));
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    // first pass to get a magnitude scale for the relative tolerance
    let scale = whole.abs().max(abs_floor);
    let tol = rel_tol * scale;
    recurse(f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH, panels)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
    panels: &mut PanelSink,
) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol || (b - a) < 1e-14 * (a.abs() + b.abs() + 1.0) {
        panels.push(a, lm, m);
        panels.push(m, rm, b);
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::Quadrature(format!(
            "max bisection depth reached on [{a}, {b}] (residual {})",
            delta.abs()
        )));
    }
    let lv = recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, panels)?;
    let rv = recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, panels)?;
    Ok(lv + rv)
}
