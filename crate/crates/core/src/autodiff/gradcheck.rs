use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked in full.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub failed: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    /// Largest relative errors, worst first.
    pub worst: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.failed == 0)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central finite differences.
///
/// `loss(params, want_grads)` returns the scalar loss and, when asked, one
/// gradient per parameter tensor. Parameters are restored after each probe.
pub fn grad_check<L>(
    names: &[String],
    params: &mut [Array2<f64>],
    mut loss: L,
    config: &GradCheckConfig,
) -> GradCheckReport
where
    L: FnMut(&[Array2<f64>], bool) -> (f64, Option<Vec<Array2<f64>>>),
{
    assert_eq!(names.len(), params.len());
    let (_, grads) = loss(params, true);
    let grads = grads.expect("loss must return gradients when asked");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.step;

    let mut tensors = Vec::with_capacity(params.len());
    let mut all: Vec<CoordCheck> = Vec::new();
    for n in 0..params.len() {
        let size = params[n].len();
        let cols = params[n].ncols();
        let coords: Vec<usize> = if size <= config.samples_per_tensor {
            (0..size).collect()
        } else {
            let mut picked = sample(&mut rng, size, config.samples_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut check = TensorCheck {
            name: names[n].clone(),
            checked: 0,
            failed: 0,
            max_rel_error: 0.0,
        };
        for idx in coords {
            let (row, col) = (idx / cols, idx % cols);
            let original = params[n][[row, col]];
            params[n][[row, col]] = original + h;
            let (plus, _) = loss(params, false);
            params[n][[row, col]] = original - h;
            let (minus, _) = loss(params, false);
            params[n][[row, col]] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[n][[row, col]];
            let rel_error = relative_error(analytic, numeric);
            check.checked += 1;
            if rel_error.is_nan() || rel_error >= config.tolerance {
                check.failed += 1;
            }
            check.max_rel_error = check.max_rel_error.max(rel_error);
            all.push(CoordCheck {
                tensor: names[n].clone(),
                row,
                col,
                analytic,
                numeric,
                rel_error,
            });
        }
        tensors.push(check);
    }
    all.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    all.truncate(10);
    GradCheckReport {
        tolerance: config.tolerance,
        tensors,
        worst: all,
    }
}
