use rand::Rng;

use crate::error::Result;
use crate::mesh::TriangleMesh;

/// Displaces every vertex by an independent uniform vector with each
/// component in `[-strength, strength]` (mm). Strength 0 returns an exact
/// copy without drawing from `rng`.
pub fn augment_translate<R: Rng + ?Sized>(mesh: &TriangleMesh, strength: f64, rng: &mut R) -> Result<TriangleMesh> {
    if strength == 0.0 {
        return Ok(mesh.clone());
    }
    let vertices = mesh
        .vertices()
        .iter()
        .map(|p| {
            let mut q = *p;
            for c in &mut q {
                *c += rng.random_range(-strength..=strength);
            }
            q
        })
        .collect();
    mesh.with_vertices(vertices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::fpfh;
    use crate::mesh::{icosphere, mesh_to_graph, StructureId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere() -> TriangleMesh {
        let (v, f) = icosphere(2, 10.0);
        TriangleMesh::new(v, f, StructureId::AmygdalaLeft).unwrap()
    }

    #[test]
    fn zero_strength_is_identity() {
        let m = sphere();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment_translate(&m, 0.0, &mut rng).unwrap();
        assert_eq!(a, m);
        let t = mesh_to_graph(&m);
        assert_eq!(fpfh(&a, &t).unwrap(), fpfh(&m, &t).unwrap());
    }

    #[test]
    fn displacement_is_bounded() {
        let m = sphere();
        let a = augment_translate(&m, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut worst: f64 = 0.0;
        for (p, q) in m.vertices().iter().zip(a.vertices()) {
            for c in 0..3 {
                worst = worst.max((p[c] - q[c]).abs());
            }
        }
        assert!(worst <= 0.1 && worst > 0.05);
    }

    #[test]
    fn replay_with_same_seed() {
        let m = sphere();
        let a = augment_translate(&m, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment_translate(&m, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
