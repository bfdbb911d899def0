use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Mat;

/// Named flat views over a parameter set, in a fixed order.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<(String, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn sq_norm(&self) -> f64 {
        self.blocks().iter().flat_map(|(_, b)| b.iter()).map(|x| x * x).sum()
    }

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }
}

/// `θ ← θ − η·g`, with `g` rescaled to norm `clip` when larger. Returns the
/// pre-clip gradient norm.
pub fn descend<P: ParamBlocks>(params: &mut P, grads: &P, lr: f64, clip: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
    for ((_, p), (_, g)) in params.blocks_mut().into_iter().zip(grads.blocks()) {
        for (x, d) in p.iter_mut().zip(g) {
            *x -= lr * scale * d;
        }
    }
    norm
}

/// Uniform `±1/√fan_in` weights.
pub fn init_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (cols.max(1) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

#[inline]
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Central-difference checks for hand-written gradients.
pub mod gradcheck {
    use super::ParamBlocks;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-5;
    pub const TOLERANCE: f64 = 1e-4;

    /// Relative error with the denominator floored at 1e-6, so coordinates
    /// whose true gradient is exactly zero are judged on absolute error.
    pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
    }

    /// Compares one random coordinate of every block against central
    /// differences. Returns the worst `(block, relative error)`.
    pub fn check_point<P: ParamBlocks + Clone>(
        params: &P,
        grads: &P,
        rng: &mut ChaCha8Rng,
        loss: impl Fn(&P) -> f64,
    ) -> Vec<(String, f64)> {
        let names: Vec<String> = params.blocks().iter().map(|(n, _)| n.clone()).collect();
        let analytic: Vec<Vec<f64>> = grads.blocks().iter().map(|(_, g)| g.to_vec()).collect();
        let mut out = Vec::new();
        for (bi, name) in names.iter().enumerate() {
            let len = analytic[bi].len();
            if len == 0 {
                continue;
            }
            let i = rng.random_range(0..len);
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.blocks_mut()[bi].1[i] += delta;
                loss(&p)
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            out.push((name.clone(), rel_error(analytic[bi][i], numeric)));
        }
        out
    }
}
