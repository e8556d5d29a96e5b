/// Error summary over a set of predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub count: usize,
}

impl Metrics {
    pub fn from_pairs(pred: &[f64], truth: &[f64]) -> Self {
        let mut acc = MetricsAccumulator::default();
        acc.add(pred, truth);
        acc.finish()
    }
}

/// Running sums; the result does not depend on how pairs are chunked.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricsAccumulator {
    abs: f64,
    sq: f64,
    count: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &[f64], truth: &[f64]) {
        assert_eq!(pred.len(), truth.len(), "prediction/target length mismatch");
        for (p, y) in pred.iter().zip(truth) {
            let e = p - y;
            self.abs += e.abs();
            self.sq += e * e;
        }
        self.count += pred.len();
    }

    pub fn finish(&self) -> Metrics {
        if self.count == 0 {
            return Metrics::default();
        }
        let n = self.count as f64;
        let mse = self.sq / n;
        Metrics {
            mae: self.abs / n,
            mse,
            rmse: mse.sqrt(),
            count: self.count,
        }
    }
}

/// Metrics on the normalised scale, per forecast step, and optionally on
/// the raw metric scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub overall: Metrics,
    pub per_horizon: Vec<Metrics>,
    pub denormalized: Option<Metrics>,
    pub note: String,
}

impl MetricsReport {
    /// `pred` and `truth` hold one `[T, N, C]` block per window.
    pub fn from_windows(pred: &[Vec<f64>], truth: &[Vec<f64>], t: usize) -> Self {
        let mut overall = MetricsAccumulator::default();
        let mut steps = vec![MetricsAccumulator::default(); t];
        for (p, y) in pred.iter().zip(truth) {
            overall.add(p, y);
            let per = p.len() / t;
            for (h, acc) in steps.iter_mut().enumerate() {
                acc.add(&p[h * per..(h + 1) * per], &y[h * per..(h + 1) * per]);
            }
        }
        Self {
            overall: overall.finish(),
            per_horizon: steps.iter().map(MetricsAccumulator::finish).collect(),
            denormalized: None,
            note: String::new(),
        }
    }
}
