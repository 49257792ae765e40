//! Python bindings. Matrices cross the boundary as lists of rows.

use nalgebra::{DMatrix, DVector, Vector3};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use kronfit::design::{DesignMatrix, FactorDims};
use kronfit::infer::overid_test;
use kronfit::matfun::{spd_exp, spd_log, SpdMatrix, SymMatrix};
use kronfit::mc::{run_study, DgpSpec, Estimator, Innovation, Perturbation, StudyConfig};
use kronfit::mdest::{md_estimate, WeightSpec};
use kronfit::moments::{compute_moments_with, MomentOptions, Panel, Regime};
use kronfit::qmle::{one_step_with_moments, LikelihoodContext};
use kronfit::shrink::shrink_factor_2x2;

create_exception!(kronfit, KronfitError, PyException);

fn err(e: kronfit::Error) -> PyErr {
    KronfitError::new_err(format!("{}: {}", e.kind(), e))
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(KronfitError::new_err("ragged rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse_regime(s: &str) -> PyResult<Regime> {
    s.parse().map_err(err)
}

fn design_for(dims: Vec<usize>) -> PyResult<DesignMatrix> {
    Ok(DesignMatrix::build(&FactorDims::new(dims).map_err(err)?))
}

/// Identified parameterisation for a list of factor dimensions.
#[pyclass(name = "Design", module = "kronfit", frozen)]
struct PyDesign {
    inner: DesignMatrix,
}

#[pymethods]
impl PyDesign {
    #[new]
    fn new(dims: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: design_for(dims)? })
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn num_moments(&self) -> usize {
        self.inner.num_moments()
    }

    #[getter]
    fn overid_df(&self) -> usize {
        self.inner.dims().overid_df()
    }

    fn matrix(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.matrix())
    }

    /// `exp(Omega(theta))` as rows.
    fn correlation(&self, theta: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let (m, _) = self.inner.theta_to_correlation(&DVector::from_vec(theta)).map_err(err)?;
        Ok(to_rows(m.as_matrix()))
    }

    /// Parameters of a Kronecker product of correlation factors, outer factor first.
    fn theta_from_factors(&self, factors: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
        let logs = factors
            .iter()
            .map(|f| {
                let m = SpdMatrix::new(to_matrix(f)?).map_err(err)?;
                Ok(spd_log(&m).into_inner())
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(self.inner.theta_from_factor_logs(&logs).map_err(err)?.as_slice().to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Design({}, s={})", self.inner.dims(), self.inner.num_params())
    }
}

/// Point estimates with plug-in standard errors.
#[pyclass(name = "Estimate", module = "kronfit", frozen, get_all)]
struct PyEstimate {
    labels: Vec<String>,
    method: String,
    regime: String,
    theta: Vec<f64>,
    std_errors: Vec<f64>,
    t: usize,
}

#[pymethods]
impl PyEstimate {
    fn __repr__(&self) -> String {
        format!("Estimate(method={:?}, theta={:?})", self.method, self.theta)
    }
}

fn moments_for(data: Vec<Vec<f64>>, known_d: Option<Vec<f64>>) -> PyResult<kronfit::moments::MomentSet> {
    let panel = Panel::new(to_matrix(&data)?).map_err(err)?;
    let opts = MomentOptions {
        known_d: known_d.map(DVector::from_vec),
        ..MomentOptions::default()
    };
    compute_moments_with(&panel, &opts).map_err(err)
}

/// Minimum-distance estimate and, if requested, the one-step update from it.
#[pyfunction]
#[pyo3(signature = (data, dims, weight = "identity", regime = "estimated-d", known_d = None, one_step = true))]
fn estimate(
    data: Vec<Vec<f64>>,
    dims: Vec<usize>,
    weight: &str,
    regime: &str,
    known_d: Option<Vec<f64>>,
    one_step: bool,
) -> PyResult<Vec<PyEstimate>> {
    let design = design_for(dims)?;
    let regime = parse_regime(regime)?;
    let weight = match weight {
        "identity" => WeightSpec::Identity,
        "optimal" => WeightSpec::FeasibleOptimal,
        other => return Err(KronfitError::new_err(format!("unknown weight '{other}'"))),
    };
    let moments = moments_for(data, known_d)?;
    let md = md_estimate(&moments, &design, &weight, regime).map_err(err)?;
    let labels = design.labels();
    let mut out = vec![PyEstimate {
        labels: labels.clone(),
        method: format!("md-{}", md.weight),
        regime: regime.to_string(),
        theta: md.theta.as_slice().to_vec(),
        std_errors: md.std_errors().as_slice().to_vec(),
        t: md.t,
    }];
    if one_step {
        let ctx = LikelihoodContext::from_moments(&moments, &design, regime).map_err(err)?;
        let os = one_step_with_moments(&md, &ctx, &moments, regime).map_err(err)?;
        out.push(PyEstimate {
            labels,
            method: "one-step".into(),
            regime: regime.to_string(),
            theta: os.theta_tilde.as_slice().to_vec(),
            std_errors: os.std_errors().as_slice().to_vec(),
            t: os.t,
        });
    }
    Ok(out)
}

/// Over-identification test; returns `(statistic, df, p_chi2, p_normal)`.
#[pyfunction]
#[pyo3(signature = (data, dims, regime = "estimated-d", known_d = None))]
fn overid(
    data: Vec<Vec<f64>>,
    dims: Vec<usize>,
    regime: &str,
    known_d: Option<Vec<f64>>,
) -> PyResult<(f64, usize, f64, f64)> {
    let design = design_for(dims)?;
    let moments = moments_for(data, known_d)?;
    let (res, _) = overid_test(&moments, &design, parse_regime(regime)?).map_err(err)?;
    Ok((res.statistic, res.df, res.p_chi2, res.p_normal))
}

/// Monte Carlo study; returns the summary as a JSON string.
#[pyfunction]
#[pyo3(signature = (dims, theta0, t = 500, reps = 1000, seed = 42, regime = "known-d", innovation_df = None, perturb = None, workers = 0))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    dims: Vec<usize>,
    theta0: Vec<f64>,
    t: usize,
    reps: usize,
    seed: u64,
    regime: &str,
    innovation_df: Option<f64>,
    perturb: Option<(usize, usize, f64)>,
    workers: usize,
) -> PyResult<String> {
    let fd = FactorDims::new(dims).map_err(err)?;
    let n = fd.n();
    let innovation = innovation_df.map_or(Innovation::Gaussian, Innovation::StudentT);
    let mut spec = DgpSpec::new(fd, DVector::from_vec(theta0), DVector::from_element(n, 1.0), innovation, t, seed)
        .map_err(err)?;
    if let Some((row, col, delta)) = perturb {
        spec = spec.with_perturbation(Perturbation { row, col, delta }).map_err(err)?;
    }
    let mut cfg = StudyConfig::new(reps, spec.theta0.len());
    cfg.regime = parse_regime(regime)?;
    cfg.estimators = vec![Estimator::MdIdentity, Estimator::OneStep];
    let summary = py.detach(|| run_study(&spec, &cfg, workers)).map_err(err)?;
    Ok(summary.to_json())
}

#[pyfunction]
fn matrix_log(m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let spd = SpdMatrix::new(to_matrix(&m)?).map_err(err)?;
    Ok(to_rows(spd_log(&spd).as_matrix()))
}

#[pyfunction]
fn matrix_exp(m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let sym = SymMatrix::new(to_matrix(&m)?).map_err(err)?;
    Ok(to_rows(spd_exp(&sym).map_err(err)?.as_matrix()))
}

/// Nearest 2x2 correlation factor to an unrestricted `vech(log Theta_j)`.
#[pyfunction]
fn shrink_2x2(target: (f64, f64, f64)) -> Vec<Vec<f64>> {
    let (_, corr) = shrink_factor_2x2(&Vector3::new(target.0, target.1, target.2));
    to_rows(&corr)
}

#[pymodule]
#[pyo3(name = "kronfit")]
fn kronfit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("KronfitError", m.py().get_type::<KronfitError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDesign>()?;
    m.add_class::<PyEstimate>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(overid, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_log, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_exp, m)?)?;
    m.add_function(wrap_pyfunction!(shrink_2x2, m)?)?;
    Ok(())
}
