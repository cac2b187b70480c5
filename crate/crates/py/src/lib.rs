use pyo3::prelude::*;

#[pymodule]
fn tfgamma(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
