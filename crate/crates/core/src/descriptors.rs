//! Fast Point Feature Histograms over the mesh 1-ring.
//!
//! For each vertex, the simplified histogram (SPFH) bins the Darboux-frame
//! angles `(alpha, phi, theta)` of every vertex–neighbor pair into three
//! 11-bin sub-histograms, each normalized to sum to 100. The final
//! descriptor mixes in the neighbors' SPFHs weighted by inverse distance:
//!
//! ```text
//! FPFH(p) = SPFH(p) + (1/k) Σ_{i ∈ N(p)} SPFH(p_i) / ‖p − p_i‖
//! ```
//!
//! All angular quantities are rigid invariant, so the descriptor is too.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::mesh::{vertex_normals, GraphTopology, TriangleMesh};

pub const BINS_PER_FEATURE: usize = 11;
pub const FPFH_DIM: usize = 3 * BINS_PER_FEATURE;

/// Below this norm the `d × u` cross product is considered parallel.
const PARALLEL_EPS: f64 = 1e-12;
/// Tolerance on `|cos|` when deciding which point plays the source role.
const ROLE_TIE_EPS: f64 = 1e-12;

/// Darboux-frame features of an oriented point pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularTriple {
    /// `v · n_t`, the sine of the angle between `n_t` and the `u–w` plane.
    pub alpha: f64,
    /// `u · (p_t − p_s) / d`.
    pub phi: f64,
    /// `atan2(w · n_t, u · n_t)` in `(−π, π]`.
    pub theta: f64,
    /// Pair distance in millimetres.
    pub d: f64,
}

/// Features for a pair with roles already assigned (`s` is the source).
pub fn pair_features(p_s: Vec3, n_s: Vec3, p_t: Vec3, n_t: Vec3) -> Result<AngularTriple> {
    let delta = geom::sub(p_t, p_s);
    let d = geom::norm(delta);
    if !(d > 0.0) {
        return Err(Error::DegenerateGeometry {
            vertex: 0,
            reason: "coincident points in pair features".into(),
        });
    }
    let u = n_s;
    let mut v = geom::cross(delta, u);
    let vn = geom::norm(v);
    if vn < PARALLEL_EPS {
        v = fallback_axis(u);
        log::debug!("pair features: displacement parallel to source normal, using fallback frame");
    } else {
        v = geom::scale(v, 1.0 / vn);
    }
    let w = geom::cross(u, v);
    let alpha = geom::dot(v, n_t);
    let phi = geom::dot(u, delta) / d;
    let mut theta = geom::dot(w, n_t).atan2(geom::dot(u, n_t));
    if theta <= -std::f64::consts::PI {
        theta = std::f64::consts::PI;
    }
    Ok(AngularTriple { alpha, phi, theta, d })
}

/// Unit vector orthogonal to `u`, built from the coordinate axis least
/// aligned with it.
fn fallback_axis(u: Vec3) -> Vec3 {
    let mut axis = 0;
    for k in 1..3 {
        if u[k].abs() < u[axis].abs() {
            axis = k;
        }
    }
    let mut e = [0.0; 3];
    e[axis] = 1.0;
    let proj = geom::sub(e, geom::scale(u, geom::dot(e, u)));
    geom::scale(proj, 1.0 / geom::norm(proj))
}

/// Pair features with the standard role assignment: the point whose normal
/// makes the smaller angle with the connecting line is the source. On a
/// tie the first point keeps the source role.
pub fn oriented_pair_features(p_a: Vec3, n_a: Vec3, p_b: Vec3, n_b: Vec3) -> Result<AngularTriple> {
    let delta = geom::sub(p_b, p_a);
    let d = geom::norm(delta);
    if !(d > 0.0) {
        return Err(Error::DegenerateGeometry {
            vertex: 0,
            reason: "coincident points in pair features".into(),
        });
    }
    let cos_a = (geom::dot(n_a, delta) / d).abs();
    let cos_b = (geom::dot(n_b, delta) / d).abs();
    if cos_b > cos_a + ROLE_TIE_EPS {
        pair_features(p_b, n_b, p_a, n_a)
    } else {
        pair_features(p_a, n_a, p_b, n_b)
    }
}

/// Bin index of `x` in `n` uniform bins over `[lo, hi]`; out-of-range
/// values land in the end bins.
#[inline]
pub fn bin_index(x: f64, lo: f64, hi: f64, n: usize) -> usize {
    let t = ((x - lo) / (hi - lo) * n as f64).floor();
    if t < 0.0 {
        0
    } else {
        (t as usize).min(n - 1)
    }
}

fn triple_bins(t: &AngularTriple) -> [usize; 3] {
    use std::f64::consts::PI;
    [
        bin_index(t.alpha, -1.0, 1.0, BINS_PER_FEATURE),
        BINS_PER_FEATURE + bin_index(t.phi, -1.0, 1.0, BINS_PER_FEATURE),
        2 * BINS_PER_FEATURE + bin_index(t.theta, -PI, PI, BINS_PER_FEATURE),
    ]
}

/// Simplified histogram of one vertex over its 1-ring.
pub fn spfh(vertex: usize, mesh: &TriangleMesh, topology: &GraphTopology, normals: &[Vec3]) -> Result<[f64; FPFH_DIM]> {
    let nbrs = topology.neighbors(vertex);
    if nbrs.is_empty() {
        return Err(Error::IsolatedVertex { vertex });
    }
    let pts = mesh.vertices();
    let mut hist = [0.0f64; FPFH_DIM];
    for &j in nbrs {
        let t = oriented_pair_features(pts[vertex], normals[vertex], pts[j], normals[j]).map_err(|_| {
            Error::DegenerateGeometry {
                vertex,
                reason: format!("coincident with neighbor {j}"),
            }
        })?;
        for b in triple_bins(&t) {
            hist[b] += 1.0;
        }
    }
    let unit = 100.0 / nbrs.len() as f64;
    for h in hist.iter_mut() {
        *h *= unit;
    }
    Ok(hist)
}

/// Per-vertex 33-bin descriptors, row-major `num_nodes × 33`.
#[derive(Debug, Clone, PartialEq)]
pub struct FpfhFeatures {
    num_nodes: usize,
    data: Vec<f32>,
}

impl FpfhFeatures {
    pub fn from_raw(num_nodes: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != num_nodes * FPFH_DIM {
            return Err(Error::Invalid(format!(
                "feature buffer has {} values, expected {}",
                data.len(),
                num_nodes * FPFH_DIM
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("FPFH features".into()));
        }
        Ok(FpfhFeatures { num_nodes, data })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * FPFH_DIM..(i + 1) * FPFH_DIM]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// FPFH for every vertex of `mesh`, with normals estimated from the mesh.
pub fn fpfh(mesh: &TriangleMesh, topology: &GraphTopology) -> Result<FpfhFeatures> {
    if let Some(v) = (0..topology.num_nodes()).find(|&v| topology.degree(v) == 0) {
        return Err(Error::IsolatedVertex { vertex: v });
    }
    let normals = vertex_normals(mesh)?;
    fpfh_with_normals(mesh, topology, &normals)
}

pub fn fpfh_with_normals(mesh: &TriangleMesh, topology: &GraphTopology, normals: &[Vec3]) -> Result<FpfhFeatures> {
    let n = topology.num_nodes();
    let spfhs: Vec<[f64; FPFH_DIM]> = (0..n)
        .into_par_iter()
        .map(|v| spfh(v, mesh, topology, normals))
        .collect::<Result<_>>()?;
    let pts = mesh.vertices();
    let mut data = Vec::with_capacity(n * FPFH_DIM);
    for v in 0..n {
        let nbrs = topology.neighbors(v);
        let mut acc = spfhs[v];
        let k = nbrs.len() as f64;
        for &j in nbrs {
            let w = geom::norm(geom::sub(pts[v], pts[j]));
            if !(w > 0.0) {
                return Err(Error::DegenerateGeometry {
                    vertex: v,
                    reason: format!("zero distance to neighbor {j}"),
                });
            }
            let scale = 1.0 / (k * w);
            for (a, s) in acc.iter_mut().zip(spfhs[j].iter()) {
                *a += scale * s;
            }
        }
        data.extend(acc.iter().map(|&x| x as f32));
    }
    FpfhFeatures::from_raw(n, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{mesh_to_graph, StructureId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Straight-line transcription of the Darboux formulas, kept separate
    /// from the implementation above.
    fn darboux_reference(ps: Vec3, ns: Vec3, pt: Vec3, nt: Vec3) -> (f64, f64, f64, f64) {
        let dx = pt[0] - ps[0];
        let dy = pt[1] - ps[1];
        let dz = pt[2] - ps[2];
        let d = (dx * dx + dy * dy + dz * dz).sqrt();
        let (ux, uy, uz) = (ns[0], ns[1], ns[2]);
        let mut vx = dy * uz - dz * uy;
        let mut vy = dz * ux - dx * uz;
        let mut vz = dx * uy - dy * ux;
        let vl = (vx * vx + vy * vy + vz * vz).sqrt();
        vx /= vl;
        vy /= vl;
        vz /= vl;
        let wx = uy * vz - uz * vy;
        let wy = uz * vx - ux * vz;
        let wz = ux * vy - uy * vx;
        let alpha = vx * nt[0] + vy * nt[1] + vz * nt[2];
        let phi = (ux * dx + uy * dy + uz * dz) / d;
        let theta = (wx * nt[0] + wy * nt[1] + wz * nt[2]).atan2(ux * nt[0] + uy * nt[1] + uz * nt[2]);
        (alpha, phi, theta, d)
    }

    fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        geom::scale(v, 1.0 / geom::norm(v))
    }

    #[test]
    fn coplanar_pair_is_zero() {
        let t = pair_features([0.0; 3], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.alpha, 0.0);
        assert_eq!(t.phi, 0.0);
        assert_eq!(t.theta, 0.0);
        assert_eq!(t.d, 1.0);
        let t = pair_features([0.3, 0.1, 2.0], [0.0, 0.0, 1.0], [-1.0, 4.0, 2.0], [0.0, 0.0, 1.0]).unwrap();
        assert!(t.alpha.abs() < 1e-15 && t.phi.abs() < 1e-15 && t.theta.abs() < 1e-15);
    }

    #[test]
    fn matches_reference_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let ps = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let pt = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let (ns, nt) = (unit(&mut rng), unit(&mut rng));
            let got = pair_features(ps, ns, pt, nt).unwrap();
            let (a, p, t, d) = darboux_reference(ps, ns, pt, nt);
            assert!((got.alpha - a).abs() < 1e-12);
            assert!((got.phi - p).abs() < 1e-12);
            assert!((got.theta - t).abs() < 1e-12);
            assert!((got.d - d).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&got.alpha) && (-1.0..=1.0).contains(&got.phi));
            assert!(got.theta > -PI && got.theta <= PI);
        }
    }

    #[test]
    fn coincident_points_error_and_parallel_fallback() {
        assert!(pair_features([1.0; 3], [0.0, 0.0, 1.0], [1.0; 3], [0.0, 0.0, 1.0]).is_err());
        let t = pair_features([0.0; 3], [0.0, 0.0, 1.0], [0.0, 0.0, 2.0], [0.0, 1.0, 0.0]).unwrap();
        assert!(t.alpha.is_finite() && t.theta.is_finite());
        assert_eq!(t.phi, 1.0);
    }

    #[test]
    fn role_assignment_prefers_smaller_angle() {
        // n_b is parallel to the connecting line, n_a orthogonal: b is source.
        let (pa, na) = ([0.0; 3], [0.0, 0.0, 1.0]);
        let (pb, nb) = ([1.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
        let got = oriented_pair_features(pa, na, pb, nb).unwrap();
        let expect = pair_features(pb, nb, pa, na).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn binning_ranges() {
        assert_eq!(bin_index(0.0, -1.0, 1.0, 11), 5);
        assert_eq!(bin_index(-1.0, -1.0, 1.0, 11), 0);
        assert_eq!(bin_index(1.0, -1.0, 1.0, 11), 10);
        assert_eq!(bin_index(PI, -PI, PI, 11), 10);
        assert_eq!(bin_index(0.0, -PI, PI, 11), 5);
    }

    fn planar_fan(k: usize) -> TriangleMesh {
        let mut v = vec![[0.0, 0.0, 0.0]];
        for i in 0..k {
            let a = i as f64 * std::f64::consts::TAU / k as f64;
            v.push([a.cos(), a.sin(), 0.0]);
        }
        let f: Vec<[usize; 3]> = (0..k).map(|i| [0, 1 + i, 1 + (i + 1) % k]).collect();
        TriangleMesh::new(v, f, StructureId::BrainStem).unwrap()
    }

    #[test]
    fn planar_fan_mass_in_central_bins() {
        let m = planar_fan(6);
        let g = mesh_to_graph(&m);
        let normals = vertex_normals(&m).unwrap();
        for v in 0..m.num_vertices() {
            let h = spfh(v, &m, &g, &normals).unwrap();
            for (b, &val) in h.iter().enumerate() {
                let expect = if b % BINS_PER_FEATURE == 5 { 100.0 } else { 0.0 };
                assert!((val - expect).abs() < 1e-9, "vertex {v} bin {b}: {val}");
            }
        }
    }

    #[test]
    fn single_neighbor_gives_one_bin_each() {
        let g = GraphTopology::from_edges(2, [(0, 1)]).unwrap();
        let m = TriangleMesh::new(
            vec![[0.0; 3], [1.0, 0.2, 0.1], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
            StructureId::BrainStem,
        )
        .unwrap();
        let normals = vec![[0.0, 0.0, 1.0], unit(&mut ChaCha8Rng::seed_from_u64(3)), [0.0, 0.0, 1.0]];
        let h = spfh(0, &m, &g, &normals).unwrap();
        for sub in h.chunks(BINS_PER_FEATURE) {
            let nz: Vec<f64> = sub.iter().copied().filter(|&x| x != 0.0).collect();
            assert_eq!(nz, vec![100.0]);
        }
    }

    #[test]
    fn spfh_matches_loop_oracle() {
        let (v, f) = crate::mesh::icosphere(2, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<Vec3> = v
            .into_iter()
            .map(|p| geom::add(p, [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)]))
            .collect();
        let m = TriangleMesh::new(v, f, StructureId::BrainStem).unwrap();
        let g = mesh_to_graph(&m);
        let normals = vertex_normals(&m).unwrap();
        for vertex in [0usize, 17, 100, 161] {
            let got = spfh(vertex, &m, &g, &normals).unwrap();
            // independent binning: explicit comparisons against bin edges
            let mut counts = [0usize; 33];
            let nbrs = g.neighbors(vertex);
            for &j in nbrs {
                let t = oriented_pair_features(m.vertices()[vertex], normals[vertex], m.vertices()[j], normals[j]).unwrap();
                let vals = [(t.alpha, -1.0, 1.0), (t.phi, -1.0, 1.0), (t.theta, -PI, PI)];
                for (fi, (x, lo, hi)) in vals.into_iter().enumerate() {
                    let width = (hi - lo) / 11.0;
                    let mut b = 10;
                    for e in 1..11 {
                        if x < lo + width * e as f64 {
                            b = e - 1;
                            break;
                        }
                    }
                    counts[fi * 11 + b] += 1;
                }
            }
            for b in 0..33 {
                let expect = counts[b] as f64 * 100.0 / nbrs.len() as f64;
                assert!((got[b] - expect).abs() < 1e-6);
            }
            for sub in got.chunks(11) {
                assert!((sub.iter().sum::<f64>() - 100.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn single_triangle_by_hand() {
        let m = TriangleMesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
            StructureId::BrainStem,
        )
        .unwrap();
        let g = mesh_to_graph(&m);
        let f = fpfh(&m, &g).unwrap();
        // Every pair is coplanar with equal normals, so each SPFH is 100 in
        // the central bins; neighbor mixing adds (1/2)(100/d1 + 100/d2).
        let s2 = 2f64.sqrt();
        let expected = [
            100.0 + 0.5 * (100.0 + 100.0),
            100.0 + 0.5 * (100.0 + 100.0 / s2),
            100.0 + 0.5 * (100.0 + 100.0 / s2),
        ];
        for v in 0..3 {
            for b in 0..33 {
                let e = if b % 11 == 5 { expected[v] } else { 0.0 };
                assert!((f.row(v)[b] as f64 - e).abs() < 1e-4, "v{v} b{b}");
            }
        }
    }

    #[test]
    fn isolated_vertex_errors() {
        let m = TriangleMesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [4.0, 4.0, 4.0]],
            vec![[0, 1, 2]],
            StructureId::BrainStem,
        )
        .unwrap();
        let g = mesh_to_graph(&m);
        assert!(matches!(fpfh(&m, &g), Err(Error::IsolatedVertex { vertex: 3 })));
    }

    #[test]
    fn rigid_invariance_on_icosphere() {
        use crate::alignment::{apply_transform, random_rotation, RigidTransform};
        let (v, f) = crate::mesh::icosphere(2, 5.0);
        let m = TriangleMesh::new(v, f, StructureId::BrainStem).unwrap();
        let g = mesh_to_graph(&m);
        let base = fpfh(&m, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let t = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), 3.0],
            };
            let moved = fpfh(&apply_transform(&t, &m), &g).unwrap();
            let diff = base
                .as_slice()
                .iter()
                .zip(moved.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(diff < 1e-4, "max diff {diff}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (v, f) = crate::mesh::icosphere(1, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<Vec3> = v
            .into_iter()
            .map(|p| geom::add(p, [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]))
            .collect();
        let m = TriangleMesh::new(v.clone(), f.clone(), StructureId::BrainStem).unwrap();
        let base = fpfh(&m, &mesh_to_graph(&m)).unwrap();

        let n = v.len();
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let mut pv = vec![[0.0; 3]; n];
        for i in 0..n {
            pv[perm[i]] = v[i];
        }
        let pf: Vec<[usize; 3]> = f.iter().map(|t| [perm[t[0]], perm[t[1]], perm[t[2]]]).collect();
        let pm = TriangleMesh::new(pv, pf, StructureId::BrainStem).unwrap();
        let permuted = fpfh(&pm, &mesh_to_graph(&pm)).unwrap();
        for i in 0..n {
            for (a, b) in base.row(i).iter().zip(permuted.row(perm[i])) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }
}
