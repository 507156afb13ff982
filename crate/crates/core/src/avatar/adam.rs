//! Adam over flat parameter slices.

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.update(params, grads, |_| lr);
    }

    /// Like [`Adam::step`] with a learning rate per element.
    pub fn step_with_rates(&mut self, params: &mut [f64], grads: &[f64], rates: &[f64]) {
        assert_eq!(rates.len(), params.len());
        self.update(params, grads, |i| rates[i]);
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr(i) * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Rebuilds per-row moment state after rows were removed or duplicated.
    /// `sources[new_row]` names the old row to copy, or `None` for fresh state.
    pub fn remap_rows(&mut self, width: usize, sources: &[Option<usize>]) {
        let mut m = vec![0.0; sources.len() * width];
        let mut v = vec![0.0; sources.len() * width];
        for (new, src) in sources.iter().enumerate() {
            if let Some(old) = src {
                m[new * width..(new + 1) * width].copy_from_slice(&self.m[old * width..(old + 1) * width]);
                v[new * width..(new + 1) * width].copy_from_slice(&self.v[old * width..(old + 1) * width]);
            }
        }
        self.m = m;
        self.v = v;
    }
}
