//! Central finite-difference oracle for checking analytic gradients.
//!
//! Evaluates the function on perturbed copies of the inputs only; it never
//! looks at the computation graph.

use ndarray::ArrayD;

/// `∂f/∂x` for every element of every input, by central differences with step `h`.
pub fn central_difference<F>(f: F, inputs: &[ArrayD<f64>], h: f64) -> Vec<ArrayD<f64>>
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = ArrayD::zeros(inputs[i].raw_dim());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].as_slice().unwrap()[j];
            work[i].as_slice_mut().unwrap()[j] = orig + h;
            let plus = f(&work);
            work[i].as_slice_mut().unwrap()[j] = orig - h;
            let minus = f(&work);
            work[i].as_slice_mut().unwrap()[j] = orig;
            g.as_slice_mut().unwrap()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Summary of a coordinate-wise comparison between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradComparison {
    pub coordinates: usize,
    pub within_tight: usize,
    pub within_loose: usize,
    pub worst: f64,
}

impl GradComparison {
    pub fn fraction_tight(&self) -> f64 {
        self.within_tight as f64 / self.coordinates.max(1) as f64
    }

    pub fn all_loose(&self) -> bool {
        self.within_loose == self.coordinates
    }
}

pub fn compare(
    analytic: &[ArrayD<f64>],
    numeric: &[ArrayD<f64>],
    tight: f64,
    loose: f64,
    floor: f64,
) -> GradComparison {
    let mut cmp = GradComparison {
        coordinates: 0,
        within_tight: 0,
        within_loose: 0,
        worst: 0.0,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (&x, &y) in a.iter().zip(n.iter()) {
            let e = relative_error(x, y, floor);
            cmp.coordinates += 1;
            cmp.within_tight += usize::from(e <= tight);
            cmp.within_loose += usize::from(e <= loose);
            cmp.worst = cmp.worst.max(e);
        }
    }
    cmp
}
