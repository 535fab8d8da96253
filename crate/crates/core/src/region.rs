//! Planar regions described by their horizontal cross-sections.
//!
//! Every region answers "which `s`-intervals lie inside at height `t`", which
//! is what the iterated quadrature needs.

use serde::{Deserialize, Serialize};

use crate::quad::sort_dedup;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Rect { s0: f64, s1: f64, t0: f64, t1: f64 },
    /// Convex polygon, vertices as `(s, t)` in either orientation.
    Polygon { vertices: Vec<(f64, f64)> },
    Disk { center: (f64, f64), radius: f64 },
    Union { parts: Vec<Region> },
    Intersection { parts: Vec<Region> },
    Complement { inner: Box<Region> },
}

pub type Intervals = Vec<(f64, f64)>;

fn union_intervals(mut v: Intervals) -> Intervals {
    v.retain(|(a, b)| b > a);
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Intervals = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn intersect_intervals(x: &Intervals, y: &Intervals) -> Intervals {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < x.len() && j < y.len() {
        let lo = x[i].0.max(y[j].0);
        let hi = x[i].1.min(y[j].1);
        if hi > lo {
            out.push((lo, hi));
        }
        if x[i].1 < y[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

fn complement_intervals(x: &Intervals) -> Intervals {
    let mut out = Vec::new();
    let mut cur = f64::NEG_INFINITY;
    for &(a, b) in x {
        if a > cur {
            out.push((cur, a));
        }
        cur = cur.max(b);
    }
    if cur < f64::INFINITY {
        out.push((cur, f64::INFINITY));
    }
    out
}

impl Region {
    pub fn rect(s0: f64, s1: f64, t0: f64, t1: f64) -> Self {
        Region::Rect { s0, s1, t0, t1 }
    }

    pub fn polygon(vertices: Vec<(f64, f64)>) -> Self {
        Region::Polygon { vertices }
    }

    pub fn disk(center: (f64, f64), radius: f64) -> Self {
        Region::Disk { center, radius }
    }

    pub fn union(parts: Vec<Region>) -> Self {
        Region::Union { parts }
    }

    pub fn intersection(parts: Vec<Region>) -> Self {
        Region::Intersection { parts }
    }

    pub fn complement(inner: Region) -> Self {
        Region::Complement { inner: Box::new(inner) }
    }

    /// Sorted, disjoint open `s`-intervals inside the region at height `t`.
    pub fn s_intervals(&self, t: f64) -> Intervals {
        match self {
            Region::Rect { s0, s1, t0, t1 } => {
                if t > *t0 && t < *t1 && s1 > s0 {
                    vec![(*s0, *s1)]
                } else {
                    vec![]
                }
            }
            Region::Polygon { vertices } => {
                let mut hits = Vec::new();
                let m = vertices.len();
                for i in 0..m {
                    let (sa, ta) = vertices[i];
                    let (sb, tb) = vertices[(i + 1) % m];
                    if ta == tb {
                        continue;
                    }
                    let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
                    if t >= lo && t <= hi {
                        // Interpolate from the nearer endpoint to avoid cancellation.
                        if (t - ta).abs() <= (t - tb).abs() {
                            hits.push(sa + (t - ta) / (tb - ta) * (sb - sa));
                        } else {
                            hits.push(sb + (t - tb) / (ta - tb) * (sa - sb));
                        }
                    }
                }
                if hits.len() < 2 {
                    return vec![];
                }
                let lo = hits.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = hits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    vec![(lo, hi)]
                } else {
                    vec![]
                }
            }
            Region::Disk { center, radius } => {
                let dt = t - center.1;
                let w2 = radius * radius - dt * dt;
                if w2 > 0.0 {
                    let w = w2.sqrt();
                    vec![(center.0 - w, center.0 + w)]
                } else {
                    vec![]
                }
            }
            Region::Union { parts } => {
                union_intervals(parts.iter().flat_map(|p| p.s_intervals(t)).collect())
            }
            Region::Intersection { parts } => {
                let mut acc: Intervals = vec![(f64::NEG_INFINITY, f64::INFINITY)];
                for p in parts {
                    acc = intersect_intervals(&acc, &p.s_intervals(t));
                    if acc.is_empty() {
                        break;
                    }
                }
                acc
            }
            Region::Complement { inner } => complement_intervals(&inner.s_intervals(t)),
        }
    }

    /// Heights where the cross-section changes shape.
    pub fn t_breaks(&self) -> Vec<f64> {
        let mut v = match self {
            Region::Rect { t0, t1, .. } => vec![*t0, *t1],
            Region::Polygon { vertices } => vertices.iter().map(|v| v.1).collect(),
            Region::Disk { center, radius } => vec![center.1 - radius, center.1, center.1 + radius],
            Region::Union { parts } | Region::Intersection { parts } => {
                parts.iter().flat_map(|p| p.t_breaks()).collect()
            }
            Region::Complement { inner } => inner.t_breaks(),
        };
        sort_dedup(&mut v);
        v
    }

    /// Heights where the cross-section width has a square-root endpoint.
    pub fn t_singular(&self) -> Vec<f64> {
        match self {
            Region::Disk { center, radius } => vec![center.1 - radius, center.1 + radius],
            Region::Union { parts } | Region::Intersection { parts } => {
                parts.iter().flat_map(|p| p.t_singular()).collect()
            }
            Region::Complement { inner } => inner.t_singular(),
            _ => vec![],
        }
    }

    pub fn contains(&self, s: f64, t: f64) -> bool {
        self.s_intervals(t).iter().any(|&(a, b)| s > a && s < b)
    }

    /// Image under `(u, v) -> (s - u, t - v)`.
    pub fn reflect_translate(&self, s: f64, t: f64) -> Region {
        match self {
            Region::Rect { s0, s1, t0, t1 } => Region::Rect { s0: s - s1, s1: s - s0, t0: t - t1, t1: t - t0 },
            Region::Polygon { vertices } => Region::Polygon {
                vertices: vertices.iter().map(|&(u, v)| (s - u, t - v)).collect(),
            },
            Region::Disk { center, radius } => Region::Disk { center: (s - center.0, t - center.1), radius: *radius },
            Region::Union { parts } => Region::Union { parts: parts.iter().map(|p| p.reflect_translate(s, t)).collect() },
            Region::Intersection { parts } => Region::Intersection {
                parts: parts.iter().map(|p| p.reflect_translate(s, t)).collect(),
            },
            Region::Complement { inner } => Region::Complement { inner: Box::new(inner.reflect_translate(s, t)) },
        }
    }

    /// Image under `(u, v) -> (u + ds, v + dt)`.
    pub fn translate(&self, ds: f64, dt: f64) -> Region {
        match self {
            Region::Rect { s0, s1, t0, t1 } => Region::Rect { s0: s0 + ds, s1: s1 + ds, t0: t0 + dt, t1: t1 + dt },
            Region::Polygon { vertices } => Region::Polygon {
                vertices: vertices.iter().map(|&(u, v)| (u + ds, v + dt)).collect(),
            },
            Region::Disk { center, radius } => Region::Disk { center: (center.0 + ds, center.1 + dt), radius: *radius },
            Region::Union { parts } => Region::Union { parts: parts.iter().map(|p| p.translate(ds, dt)).collect() },
            Region::Intersection { parts } => Region::Intersection {
                parts: parts.iter().map(|p| p.translate(ds, dt)).collect(),
            },
            Region::Complement { inner } => Region::Complement { inner: Box::new(inner.translate(ds, dt)) },
        }
    }

    /// Image under `(u, v) -> (v, u)`.
    pub fn transpose(&self) -> Region {
        match self {
            Region::Rect { s0, s1, t0, t1 } => Region::Rect { s0: *t0, s1: *t1, t0: *s0, t1: *s1 },
            Region::Polygon { vertices } => Region::Polygon { vertices: vertices.iter().map(|&(u, v)| (v, u)).collect() },
            Region::Disk { center, radius } => Region::Disk { center: (center.1, center.0), radius: *radius },
            Region::Union { parts } => Region::Union { parts: parts.iter().map(Region::transpose).collect() },
            Region::Intersection { parts } => Region::Intersection { parts: parts.iter().map(Region::transpose).collect() },
            Region::Complement { inner } => Region::Complement { inner: Box::new(inner.transpose()) },
        }
    }

    /// Lebesgue measure of the region clipped to `[lo, hi]^2`, by quadrature of its cross-sections.
    pub fn area_within(&self, lo: f64, hi: f64) -> crate::error::Result<f64> {
        let clip = Region::intersection(vec![self.clone(), Region::rect(lo, hi, lo, hi)]);
        let breaks = clip.t_breaks();
        let sing = clip.t_singular();
        let width = |t: f64| clip.s_intervals(t).iter().map(|(a, b)| b - a).sum::<f64>();
        let cfg = crate::quad::QuadratureConfig::default();
        Ok(crate::quad::integrate(width, lo, hi, &breaks, &sing, &cfg)?.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_slices() {
        let tri = Region::polygon(vec![(0.5, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let iv = tri.s_intervals(0.5);
        assert_eq!(iv.len(), 1);
        assert!((iv[0].0 - 0.25).abs() < 1e-15 && (iv[0].1 - 0.75).abs() < 1e-15);
        assert!(tri.contains(0.5, 0.9));
        assert!(!tri.contains(0.1, 0.1));
        assert!((tri.area_within(0.0, 1.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn boolean_ops() {
        let a = Region::rect(0.0, 0.6, 0.0, 1.0);
        let b = Region::rect(0.4, 1.0, 0.0, 1.0);
        let u = Region::union(vec![a.clone(), b.clone()]);
        let i = Region::intersection(vec![a.clone(), b]);
        assert!((u.area_within(0.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((i.area_within(0.0, 1.0).unwrap() - 0.2).abs() < 1e-12);
        let c = Region::complement(a);
        assert!((c.area_within(0.0, 1.0).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn disk_area() {
        let d = Region::disk((0.5, 0.5), 0.25);
        let a = d.area_within(0.0, 1.0).unwrap();
        assert!((a - std::f64::consts::PI / 16.0).abs() < 1e-9, "{a}");
    }

    #[test]
    fn reflection() {
        let r = Region::rect(0.2, 0.7, 0.1, 0.9).reflect_translate(1.0, 1.0);
        assert_eq!(r, Region::rect(0.30000000000000004, 0.8, 0.09999999999999998, 0.9));
    }
}
