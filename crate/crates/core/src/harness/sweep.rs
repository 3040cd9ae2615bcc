//! Static (exit layer, speculation length) grid sweeps.

use super::{decode, session_seed, HarnessError};
use crate::baselines::LsPolicy;
use crate::model::LayeredModel;
use crate::types::{SessionConfig, TokenId};
use std::io::Write;
use std::path::Path;

/// Mean eTPL per `(ℓ, d)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub ells: Vec<usize>,
    pub ds: Vec<usize>,
    /// `values[i][j]` is the cell `(ells[i], ds[j])`.
    pub values: Vec<Vec<f64>>,
}

impl SweepGrid {
    pub fn get(&self, ell: usize, d: usize) -> Option<f64> {
        let i = self.ells.iter().position(|&e| e == ell)?;
        let j = self.ds.iter().position(|&x| x == d)?;
        Some(self.values[i][j])
    }

    /// Best cell, preferring smaller `ℓ` then smaller `d` on ties.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let mut best = (self.ells[0], self.ds[0], f64::NEG_INFINITY);
        for (i, &ell) in self.ells.iter().enumerate() {
            for (j, &d) in self.ds.iter().enumerate() {
                if self.values[i][j] > best.2 {
                    best = (ell, d, self.values[i][j]);
                }
            }
        }
        best
    }

    /// CSV matrix: header row holds the `d` axis, first column the `ℓ` axis.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["ell\\d".to_string()];
        header.extend(self.ds.iter().map(|d| d.to_string()));
        wtr.write_record(&header)?;
        for (i, ell) in self.ells.iter().enumerate() {
            let mut row = vec![ell.to_string()];
            row.extend(self.values[i].iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn check_axes(cfg: &SessionConfig, ells: &[usize], ds: &[usize]) -> Result<(), HarnessError> {
    if ells.is_empty() || ds.is_empty() {
        return Err(HarnessError::Usage("sweep ranges must be non-empty".into()));
    }
    if let Some(e) = ells.iter().find(|&&e| e == 0 || e >= cfg.num_layers) {
        return Err(HarnessError::Usage(format!("exit layer {e} outside [1, {})", cfg.num_layers)));
    }
    if let Some(d) = ds.iter().find(|&&d| d > cfg.d_max) {
        return Err(HarnessError::Usage(format!("speculation length {d} above d_max={}", cfg.d_max)));
    }
    Ok(())
}

/// Runs static early-exit speculation for every cell over `prompts` and
/// averages the per-prompt eTPL.
pub fn grid_sweep(
    model: &dyn LayeredModel,
    cfg: &SessionConfig,
    ells: &[usize],
    ds: &[usize],
    prompts: &[Vec<TokenId>],
    seed: u64,
) -> Result<SweepGrid, HarnessError> {
    Ok(sweep_impl(model, cfg, ells, ds, prompts, seed, None)?.0)
}

/// Like [`grid_sweep`], additionally splitting generation into segments of
/// `segment_len` tokens. A round is attributed to the segment in which it
/// starts. Returns the whole-run grid and one grid per segment.
pub fn segmented_sweep(
    model: &dyn LayeredModel,
    cfg: &SessionConfig,
    ells: &[usize],
    ds: &[usize],
    prompts: &[Vec<TokenId>],
    seed: u64,
    segment_len: usize,
) -> Result<(SweepGrid, Vec<SweepGrid>), HarnessError> {
    if segment_len == 0 {
        return Err(HarnessError::Usage("segment length must be >= 1".into()));
    }
    sweep_impl(model, cfg, ells, ds, prompts, seed, Some(segment_len))
}

fn sweep_impl(
    model: &dyn LayeredModel,
    cfg: &SessionConfig,
    ells: &[usize],
    ds: &[usize],
    prompts: &[Vec<TokenId>],
    seed: u64,
    segment_len: Option<usize>,
) -> Result<(SweepGrid, Vec<SweepGrid>), HarnessError> {
    check_axes(cfg, ells, ds)?;
    if prompts.is_empty() {
        return Err(HarnessError::Usage("sweep needs at least one prompt".into()));
    }
    let n_seg = segment_len.map_or(0, |s| cfg.max_new_tokens.div_ceil(s));
    let blank = || vec![vec![0.0; ds.len()]; ells.len()];
    let mut overall = blank();
    let mut segments = vec![blank(); n_seg];
    for (i, &ell) in ells.iter().enumerate() {
        for (j, &d) in ds.iter().enumerate() {
            let mut total = 0.0;
            let mut seg_sum = vec![0.0; n_seg];
            let mut seg_n = vec![0usize; n_seg];
            for (k, prompt) in prompts.iter().enumerate() {
                let mut policy = LsPolicy::new(ell, d, cfg)?;
                let gen = decode(model, cfg, prompt, &mut policy, session_seed(seed, k))?;
                total += gen.etpl();
                if let Some(len) = segment_len {
                    let mut tokens = vec![0u64; n_seg];
                    let mut layers = vec![0u64; n_seg];
                    let mut pos = 0;
                    for r in &gen.records {
                        let s = pos / len;
                        tokens[s] += r.emitted_len as u64;
                        layers[s] += r.layers_loaded;
                        pos += r.emitted_len;
                    }
                    for s in 0..n_seg {
                        if layers[s] > 0 {
                            seg_sum[s] += tokens[s] as f64 / layers[s] as f64;
                            seg_n[s] += 1;
                        }
                    }
                }
            }
            overall[i][j] = total / prompts.len() as f64;
            for s in 0..n_seg {
                segments[s][i][j] = if seg_n[s] > 0 { seg_sum[s] / seg_n[s] as f64 } else { 0.0 };
            }
        }
    }
    let grid = |values| SweepGrid { ells: ells.to_vec(), ds: ds.to_vec(), values };
    Ok((grid(overall), segments.into_iter().map(grid).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synthetic_prompts;
    use crate::model::{ModelSpec, Profile, ProfileShape, SyntheticModel};

    fn cfg(l: usize, tokens: usize) -> SessionConfig {
        let mut c = SessionConfig::new(l, 16);
        c.max_new_tokens = tokens;
        c
    }

    #[test]
    fn zero_length_column_is_vanilla() {
        let spec = ModelSpec::agreement(Profile::Shape(ProfileShape::Linear { first: 0.2, last: 0.9 }));
        let m = SyntheticModel::new(&spec, 12, 16, 0).unwrap();
        let c = cfg(12, 40);
        let prompts = synthetic_prompts(&m, 3, 8, 1).unwrap();
        let g = grid_sweep(&m, &c, &[1, 4, 9], &[0], &prompts, 2).unwrap();
        for row in &g.values {
            assert_eq!(row[0], 1.0 / 12.0);
        }
    }

    #[test]
    fn step_profile_peaks_at_the_step() {
        // Layers below 5 never agree, layers 5.. always agree: ℓ = 5 is the
        // cheapest perfect drafter, and with α = 1 the longest draft wins.
        let spec = ModelSpec::agreement(Profile::Shape(ProfileShape::Step { at: 5, low: 0.0, high: 1.0 }));
        for seed in 0..3 {
            let m = SyntheticModel::new(&spec, 16, 16, seed).unwrap();
            let c = cfg(16, 60);
            let prompts = synthetic_prompts(&m, 2, 8, seed).unwrap();
            let ells: Vec<usize> = (1..16).collect();
            let g = grid_sweep(&m, &c, &ells, &[0, 2, 4, 8], &prompts, seed).unwrap();
            let (ell, d, _) = g.argmax();
            assert_eq!((ell, d), (5, 8));
        }
    }

    #[test]
    fn segmented_argmax_follows_regimes() {
        let spec = ModelSpec::regime_switching(vec![
            crate::model::Regime {
                segment_len: 8 + 64,
                profile: Profile::Shape(ProfileShape::Step { at: 2, low: 0.0, high: 1.0 }),
            },
            crate::model::Regime {
                segment_len: 64,
                profile: Profile::Shape(ProfileShape::Step { at: 6, low: 0.0, high: 1.0 }),
            },
        ]);
        let m = SyntheticModel::new(&spec, 10, 16, 3).unwrap();
        let c = cfg(10, 128);
        let prompts = synthetic_prompts(&m, 2, 8, 0).unwrap();
        let (_, segs) = segmented_sweep(&m, &c, &(1..10).collect::<Vec<_>>(), &[1, 3], &prompts, 0, 64).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].argmax().0, 2);
        assert_eq!(segs[1].argmax().0, 6);
    }

    #[test]
    fn rejects_bad_axes() {
        let m = SyntheticModel::new(&ModelSpec::cycle_toy(16), 8, 16, 0).unwrap();
        let c = cfg(8, 10);
        let p = vec![vec![TokenId(0)]];
        assert!(grid_sweep(&m, &c, &[], &[0], &p, 0).is_err());
        assert!(grid_sweep(&m, &c, &[8], &[0], &p, 0).is_err());
        assert!(grid_sweep(&m, &c, &[1], &[19], &p, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let g = SweepGrid { ells: vec![1, 2], ds: vec![0, 1], values: vec![vec![0.5, 0.25], vec![0.125, 1.0]] };
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "ell\\d,0,1\n1,0.5,0.25\n2,0.125,1\n");
        assert_eq!(g.argmax(), (2, 1, 1.0));
        assert_eq!(g.get(1, 1), Some(0.25));
    }
}
