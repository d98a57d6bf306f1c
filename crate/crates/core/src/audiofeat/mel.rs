/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the `n_fft/2 + 1` power-spectrum bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// Per filter: first non-zero bin and its weights.
    rows: Vec<(usize, Vec<f64>)>,
    edges: Vec<f64>,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let rows = (0..n_mels)
            .map(|m| {
                let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut w: Vec<f64> = (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - lo) / (centre - lo);
                        let down = (hi - f) / (hi - centre);
                        up.min(down).max(0.0)
                    })
                    .collect();
                // filters narrower than one bin fall back to the bin nearest their centre
                if w.iter().all(|&v| v == 0.0) {
                    let k = ((centre / bin_hz).round() as usize).min(n_bins - 1);
                    w[k] = 1.0;
                }
                let first = w.iter().position(|&v| v > 0.0).unwrap();
                let last = w.iter().rposition(|&v| v > 0.0).unwrap();
                (first, w[first..=last].to_vec())
            })
            .collect();
        Self {
            rows,
            edges,
            n_bins,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.rows.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// `(lower, centre, upper)` edge frequencies of filter `m` in Hz.
    pub fn edges_hz(&self, m: usize) -> (f64, f64, f64) {
        (self.edges[m], self.edges[m + 1], self.edges[m + 2])
    }

    /// Dense weight row of filter `m`.
    pub fn weights(&self, m: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_bins];
        let (first, w) = &self.rows[m];
        row[*first..first + w.len()].copy_from_slice(w);
        row
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, (first, w)) in out.iter_mut().zip(&self.rows) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }
}
