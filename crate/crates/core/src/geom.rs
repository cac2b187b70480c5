//! Unit-ball volumes and sphere areas, exact via the two-step recurrence.

/// Volume of the unit ball in `R^d` (`V_0 = 1`, `V_1 = 2`, `V_d = 2π V_{d-2}/d`).
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * std::f64::consts::PI / d as f64 * unit_ball_volume(d - 2),
    }
}

/// Surface area of the unit sphere in `R^d`: `σ_d = d V_d`.
pub fn unit_sphere_area(d: usize) -> f64 {
    d as f64 * unit_ball_volume(d)
}
