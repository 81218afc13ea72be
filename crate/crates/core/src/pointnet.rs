//! Farthest-point sampling, radius grouping and a two-stage set-abstraction
//! encoder that turns a raw cloud into seed points with features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{check_block, uniform, weighted_sum, GradCase, Scope};
use crate::nn::{Builder, Ctx, Group, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{concat_cols, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<[f64; 3]>,
    /// Per-point channels fed to the first stage (intensity, optionally painted color).
    pub channels: Vec<Vec<f64>>,
    pub frame: usize,
}

impl PointCloud {
    pub fn new(xyz: Vec<[f64; 3]>, intensity: Vec<f64>, frame: usize) -> Result<Self> {
        if xyz.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if intensity.len() != xyz.len() {
            return Err(Error::Invalid {
                op: "point_cloud",
                detail: format!("{} intensities for {} points", intensity.len(), xyz.len()),
            });
        }
        if xyz.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "point_cloud" });
        }
        Ok(Self {
            xyz,
            channels: intensity.into_iter().map(|i| vec![i]).collect(),
            frame,
        })
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    /// Appends extra per-point channels (for example painted RGB).
    pub fn with_extra_channels(mut self, extra: &[Vec<f64>]) -> Result<Self> {
        if extra.len() != self.len() {
            return Err(Error::Invalid {
                op: "point_cloud",
                detail: "extra channels must cover every point".into(),
            });
        }
        for (c, e) in self.channels.iter_mut().zip(extra) {
            c.extend_from_slice(e);
        }
        Ok(self)
    }

    /// Union of two clouds; frame index of `self` is kept.
    pub fn merged(&self, other: &PointCloud) -> PointCloud {
        let mut out = self.clone();
        out.xyz.extend_from_slice(&other.xyz);
        out.channels.extend(other.channels.iter().cloned());
        out
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// `s` indices chosen greedily by max-min distance, starting from index 0.
///
/// Ties go to the lowest index; when `s` exceeds the cloud size the
/// selection repeats from the start.
pub fn farthest_point_sample(xyz: &[[f64; 3]], s: usize) -> Result<Vec<usize>> {
    let n = xyz.len();
    if n == 0 {
        return Err(Error::Empty("farthest_point_sample"));
    }
    let picks = s.min(n);
    let mut chosen = Vec::with_capacity(s);
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = 0usize;
    for _ in 0..picks {
        chosen.push(cur);
        let c = xyz[cur];
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in xyz.iter().enumerate() {
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    for i in picks..s {
        chosen.push(chosen[i % picks]);
    }
    Ok(chosen)
}

/// Per center, the nearest points within `radius` (up to `k`, distance then
/// index order), padded with the nearest one; a center with no point in
/// range falls back to its nearest point.
pub fn ball_query(xyz: &[[f64; 3]], centers: &[[f64; 3]], radius: f64, k: usize) -> Result<Vec<Vec<usize>>> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(Error::Invalid {
            op: "ball_query",
            detail: format!("radius {radius} must be positive"),
        });
    }
    if xyz.is_empty() {
        return Err(Error::Empty("ball_query"));
    }
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centers.len());
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for c in centers {
        cand.clear();
        let mut nearest = (f64::INFINITY, 0usize);
        for (i, p) in xyz.iter().enumerate() {
            let d = dist2(p, c);
            if d <= r2 {
                cand.push((d, i));
            }
            if d < nearest.0 {
                nearest = (d, i);
            }
        }
        let row = if cand.is_empty() {
            vec![nearest.1; k]
        } else {
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut row: Vec<usize> = cand.iter().take(k).map(|&(_, i)| i).collect();
            let first = row[0];
            row.resize(k, first);
            row
        };
        out.push(row);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub seeds: usize,
    pub radius: f64,
    pub neighbors: usize,
    pub mlp: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointEncoderConfig {
    pub stages: Vec<StageConfig>,
    /// Per-point input channels besides local xyz.
    pub in_channels: usize,
}

impl PointEncoderConfig {
    pub fn desk(dim: usize) -> Self {
        Self {
            stages: vec![
                StageConfig {
                    seeds: 256,
                    radius: 0.8,
                    neighbors: 16,
                    mlp: vec![32, 64],
                },
                StageConfig {
                    seeds: 64,
                    radius: 1.6,
                    neighbors: 16,
                    mlp: vec![128, dim],
                },
            ],
            in_channels: 1,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.stages
            .last()
            .and_then(|s| s.mlp.last())
            .copied()
            .unwrap_or(0)
    }

    pub fn seeds(&self) -> usize {
        self.stages.last().map_or(0, |s| s.seeds)
    }
}

#[derive(Clone, Debug)]
pub struct SetAbstraction {
    pub config: StageConfig,
    pub layers: Vec<Linear>,
}

impl SetAbstraction {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, in_features: usize, config: StageConfig) -> Result<Self> {
        if config.mlp.is_empty() || config.neighbors == 0 || config.seeds == 0 {
            return Err(Error::Config(format!("set abstraction stage {name} is empty")));
        }
        let layers = bd.scope(name, |bd| {
            let mut d = in_features + 3;
            config
                .mlp
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let l = Linear::new(bd, &format!("mlp{i}"), d, w);
                    d = w;
                    l
                })
                .collect()
        });
        Ok(Self { config, layers })
    }

    /// Local grouping, shared MLP and max-pool over each group.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        xyz: &[[f64; 3]],
        features: Var<'t, T>,
    ) -> Result<(Vec<[f64; 3]>, Var<'t, T>)> {
        let c = &self.config;
        let idx = farthest_point_sample(xyz, c.seeds)?;
        let centers: Vec<[f64; 3]> = idx.iter().map(|&i| xyz[i]).collect();
        let groups = ball_query(xyz, &centers, c.radius, c.neighbors)?;
        let flat: Vec<usize> = groups.iter().flatten().copied().collect();
        let inv_r = 1.0 / c.radius;
        let mut rel = Vec::with_capacity(flat.len() * 3);
        for (g, row) in groups.iter().enumerate() {
            let ctr = centers[g];
            for &j in row {
                let p = xyz[j];
                rel.extend((0..3).map(|k| T::c((p[k] - ctr[k]) * inv_r)));
            }
        }
        let rel = cx.constant(Tensor::new(vec![flat.len(), 3], rel)?)?;
        let mut h = concat_cols(&[rel, features.gather_rows(&flat)?])?;
        for l in &self.layers {
            h = l.forward(cx, h)?.relu()?;
        }
        Ok((centers, h.group_max(c.neighbors)?))
    }
}

#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub config: PointEncoderConfig,
    pub stages: Vec<SetAbstraction>,
}

/// Seed positions and features produced by the point encoder.
pub struct SeedSet<'t, T: Scalar> {
    pub positions: Vec<[f64; 3]>,
    pub features: Var<'t, T>,
}

impl PointEncoder {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, config: PointEncoderConfig, dim: usize) -> Result<Self> {
        if config.out_dim() != dim {
            return Err(Error::Config(format!(
                "point encoder emits {} channels, model dim is {dim}",
                config.out_dim()
            )));
        }
        let stages = bd.with_group(Group::PointEncoder, |bd| {
            bd.scope(name, |bd| {
                let mut d = config.in_channels;
                config
                    .stages
                    .iter()
                    .enumerate()
                    .map(|(i, st)| {
                        let sa = SetAbstraction::new(bd, &format!("sa{i}"), d, st.clone())?;
                        d = *st.mlp.last().expect("checked non-empty");
                        Ok(sa)
                    })
                    .collect::<Result<Vec<_>>>()
            })
        })?;
        Ok(Self { config, stages })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, pc: &PointCloud) -> Result<SeedSet<'t, T>> {
        if pc.channel_count() != self.config.in_channels {
            return Err(Error::Config(format!(
                "cloud carries {} channels, encoder expects {}",
                pc.channel_count(),
                self.config.in_channels
            )));
        }
        let ch: Vec<T> = pc.channels.iter().flatten().map(|&v| T::c(v)).collect();
        let mut feats = cx.constant(Tensor::new(vec![pc.len(), self.config.in_channels], ch)?)?;
        let mut xyz = pc.xyz.clone();
        for st in &self.stages {
            let (centers, f) = st.forward(cx, &xyz, feats)?;
            xyz = centers;
            feats = f;
        }
        Ok(SeedSet {
            positions: xyz,
            features: feats,
        })
    }
}

pub fn grad_cases() -> Vec<GradCase> {
    vec![GradCase::new("set_abstraction", Scope::Model, |rng, fault| {
        let mut store = ParamStore::new();
        let n = rng.gen_range(12..30);
        let xyz: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)])
            .collect();
        let feats = store.add("features", uniform(rng, &[n, 2], -1.0, 1.0), Group::Main);
        let cfg = StageConfig {
            seeds: 5,
            radius: 0.9,
            neighbors: 4,
            mlp: vec![6, 5],
        };
        let sa = SetAbstraction::new(&mut Builder::new(&mut store, rng), "sa", 2, cfg)?;
        let w = uniform(rng, &[5, 5], -1.0, 1.0);
        check_block(&store, rng, fault, move |cx| {
            let (_, out) = sa.forward(cx, &xyz, cx.p(feats)?)?;
            weighted_sum(out, &w)
        })
    })]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_second_pick_is_diagonal() {
        let sq = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(farthest_point_sample(&sq, 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn oversampling_wraps() {
        let pts = [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 5).unwrap(), vec![0, 1, 0, 1, 0]);
        assert!(farthest_point_sample(&[], 1).is_err());
    }
}
