//! Isosurface extraction, surface point sampling and the evaluation
//! metrics (Chamfer distance, coverage, minimum matching distance, masked
//! PSNR).

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::camera::{all_pixels, pixel_rays, Camera};
use crate::error::{Error, Result};
use crate::field::{vertex_coord, ActivationConfig, RadianceField};
use crate::fit::psnr_from_mse;
use crate::mc_tables::TRIANGLE_TABLE;
use crate::render::{render_image, RenderConfig};
use crate::sampler::VoxelMask;
use crate::vec3::{self, Vec3};

/// Default number of surface samples per shape.
pub const DEFAULT_SURFACE_POINTS: usize = 2048;

const DEGENERATE_AREA: f64 = 1e-12;

/// Corner offsets `(x, y, z)` of a lattice cell.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

pub fn triangle_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    0.5 * vec3::norm(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)))
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self, tri: usize) -> f64 {
        let [a, b, c] = self.triangles[tri];
        triangle_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    /// `V − E + F`, counting only vertices referenced by a triangle.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = HashSet::new();
        let mut edges = HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                used.insert(a);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        used.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// ASCII OBJ with `v` and 1-based `f` records.
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }
}

/// Half the density of a zero pre-activation.
pub fn default_iso(act: &ActivationConfig) -> f64 {
    0.5 * act.density(0.0)
}

/// Marching cubes over an `n³` scalar lattice at voxel-centre positions.
pub fn marching_cubes_grid(values: &[f64], n: usize, iso: f64) -> Mesh {
    assert_eq!(values.len(), n.pow(3), "lattice length");
    let mut mesh = Mesh::default();
    if n < 2 {
        return mesh;
    }
    let at = |x: usize, y: usize, z: usize| values[(z * n + y) * n + x];
    let pos = |x: usize, y: usize, z: usize| [vertex_coord(n, x), vertex_coord(n, y), vertex_coord(n, z)];
    // one vertex per crossed lattice edge, keyed by (lower corner, axis)
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for z in 0..n - 1 {
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let corner = |k: usize| [x + CORNERS[k][0], y + CORNERS[k][1], z + CORNERS[k][2]];
                let mut case = 0usize;
                for k in 0..8 {
                    let [cx, cy, cz] = corner(k);
                    if at(cx, cy, cz) < iso {
                        case |= 1 << k;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let mut local = [usize::MAX; 12];
                let row = &TRIANGLE_TABLE[case];
                for tri in row.chunks(3).take_while(|c| c[0] >= 0) {
                    let mut ids = [0usize; 3];
                    for (slot, &e) in ids.iter_mut().zip(tri) {
                        let e = e as usize;
                        if local[e] == usize::MAX {
                            let (a, b) = (corner(EDGES[e][0]), corner(EDGES[e][1]));
                            let lo = if a <= b { a } else { b };
                            let axis = (0..3).find(|&i| a[i] != b[i]).expect("edge spans one axis");
                            let key = ((lo[2] * n + lo[1]) * n + lo[0], axis);
                            local[e] = *edge_vertex.entry(key).or_insert_with(|| {
                                let (va, vb) = (at(a[0], a[1], a[2]), at(b[0], b[1], b[2]));
                                let s = if vb != va {
                                    ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                                } else {
                                    0.5
                                };
                                let (pa, pb) = (pos(a[0], a[1], a[2]), pos(b[0], b[1], b[2]));
                                mesh.vertices.push(vec3::add(pa, vec3::scale(vec3::sub(pb, pa), s)));
                                mesh.vertices.len() - 1
                            });
                        }
                        *slot = local[e];
                    }
                    let [a, b, c] = ids;
                    if triangle_area(mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]) > DEGENERATE_AREA {
                        mesh.triangles.push(ids);
                    }
                }
            }
        }
    }
    mesh
}

/// Marching cubes on the activated density of `f`.
pub fn marching_cubes(f: &RadianceField, iso: f64, act: &ActivationConfig) -> Result<Mesh> {
    if !(iso > 0.0) {
        return Err(Error::Config(format!("iso level must be positive, got {iso}")));
    }
    let n = f.resolution();
    let density: Vec<f64> = f.values()[..n.pow(3)].iter().map(|&p| act.density(p as f64)).collect();
    Ok(marching_cubes_grid(&density, n, iso))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Vec<Vec3>,
    pub normalized: bool,
}

impl PointSet {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            normalized: false,
        }
    }

    /// Centres the points on their centroid, then scales each axis so the
    /// largest absolute coordinate is 1. Axes without extent are left
    /// unscaled.
    pub fn normalize(mut self) -> Self {
        if self.points.is_empty() {
            return self;
        }
        let inv = 1.0 / self.points.len() as f64;
        let centroid = self
            .points
            .iter()
            .fold([0.0; 3], |acc, p| vec3::add(acc, vec3::scale(*p, inv)));
        for p in &mut self.points {
            *p = vec3::sub(*p, centroid);
        }
        for a in 0..3 {
            let m = self.points.iter().map(|p| p[a].abs()).fold(0.0, f64::max);
            if m > 1e-12 {
                self.points.iter_mut().for_each(|p| p[a] /= m);
            }
        }
        self.normalized = true;
        self
    }
}

/// Area-weighted uniform samples on the mesh surface, normalized.
pub fn sample_surface<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<PointSet> {
    Ok(sample_surface_raw(mesh, n, rng)?.normalize())
}

/// [`sample_surface`] without normalization.
pub fn sample_surface_raw<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<PointSet> {
    if mesh.is_empty() {
        return Err(Error::Empty("cannot sample an empty mesh".into()));
    }
    if n == 0 {
        return Err(Error::Empty("zero surface samples requested".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for i in 0..mesh.triangles.len() {
        total += mesh.area(i);
        cumulative.push(total);
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.gen::<f64>() * total;
        let tri = cumulative.partition_point(|&c| c <= r).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangles[tri].map(|i| mesh.vertices[i]);
        let (r1, r2) = (rng.gen::<f64>().sqrt(), rng.gen::<f64>());
        let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        points.push(std::array::from_fn(|k| wa * a[k] + wb * b[k] + wc * c[k]));
    }
    Ok(PointSet::new(points))
}

fn nearest_sq(p: Vec3, set: &[Vec3]) -> f64 {
    set.iter()
        .map(|q| {
            let d = vec3::sub(p, *q);
            vec3::dot(d, d)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Sum over both sets of squared distances to the nearest point of the
/// other set.
pub fn chamfer(x: &PointSet, y: &PointSet) -> Result<f64> {
    if x.points.is_empty() || y.points.is_empty() {
        return Err(Error::Empty("chamfer distance of an empty point set".into()));
    }
    let forward: f64 = x.points.iter().map(|&p| nearest_sq(p, &y.points)).sum();
    let backward: f64 = y.points.iter().map(|&p| nearest_sq(p, &x.points)).sum();
    Ok(forward + backward)
}

/// Chamfer distances `[generated][reference]`.
pub fn chamfer_matrix(sg: &[PointSet], sr: &[PointSet]) -> Result<Vec<Vec<f64>>> {
    if sg.is_empty() || sr.is_empty() {
        return Err(Error::Empty("metric over an empty collection".into()));
    }
    sg.iter().map(|x| sr.iter().map(|y| chamfer(x, y)).collect()).collect()
}

/// Fraction of references that are the nearest reference of some generated
/// set; ties go to the lowest index.
pub fn coverage_from_matrix(cd: &[Vec<f64>]) -> f64 {
    let refs = cd[0].len();
    let mut matched = HashSet::new();
    for row in cd {
        let mut best = 0;
        for (j, &d) in row.iter().enumerate() {
            if d < row[best] {
                best = j;
            }
        }
        matched.insert(best);
    }
    matched.len() as f64 / refs as f64
}

/// Mean over references of the smallest distance to any generated set.
pub fn mmd_from_matrix(cd: &[Vec<f64>]) -> f64 {
    let refs = cd[0].len();
    (0..refs)
        .map(|j| cd.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / refs as f64
}

pub fn coverage(sg: &[PointSet], sr: &[PointSet]) -> Result<f64> {
    Ok(coverage_from_matrix(&chamfer_matrix(sg, sr)?))
}

pub fn mmd(sg: &[PointSet], sr: &[PointSet]) -> Result<f64> {
    Ok(mmd_from_matrix(&chamfer_matrix(sg, sr)?))
}

/// Nearest lattice vertex to `p`, as `(z, y, x)`.
fn voxel_of(n: usize, p: Vec3) -> [usize; 3] {
    let h = 2.0 / n as f64;
    let idx = |c: f64| (((c + 1.0) / h - 0.5).round().max(0.0) as usize).min(n - 1);
    [idx(p[2]), idx(p[1]), idx(p[0])]
}

/// PSNR between renders of `f_out` and `f_in` over pixels whose expected
/// termination point (from `f_in`) lies outside the mask. Pixels with
/// alpha below 0.5 count as unmasked.
pub fn masked_psnr(
    f_out: &RadianceField,
    f_in: &RadianceField,
    mask: &VoxelMask,
    cams: &[Camera],
    cfg: &RenderConfig,
    act: &ActivationConfig,
) -> Result<f64> {
    if cams.is_empty() {
        return Err(Error::Empty("masked PSNR needs at least one camera".into()));
    }
    let n = f_in.resolution();
    if f_out.resolution() != n || mask.resolution() != n {
        return Err(Error::Dimension(format!(
            "resolutions differ: output {}, input {n}, mask {}",
            f_out.resolution(),
            mask.resolution()
        )));
    }
    let mut se = 0.0;
    let mut count = 0usize;
    for cam in cams {
        let reference = render_image(f_in, cam, cfg, act)?;
        let output = render_image(f_out, cam, cfg, act)?;
        let rays = pixel_rays(cam, &all_pixels(cam.width(), cam.height()))?;
        for (i, ray) in rays.iter().enumerate() {
            let keep = if reference.alpha[i] < 0.5 {
                true
            } else {
                let [z, y, x] = voxel_of(n, ray.at(reference.depth[i]));
                !mask.is_masked(z, y, x)
            };
            if keep {
                let (a, b) = (reference.image.pixels[i], output.image.pixels[i]);
                se += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("no unmasked pixels to evaluate".into()));
    }
    Ok(psnr_from_mse(se / (3 * count) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chamfer_hand_values() {
        let x = PointSet::new(vec![[0.0; 3]]);
        let y = PointSet::new(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&x, &y).unwrap(), 2.0);
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        assert!(chamfer(&x, &PointSet::new(vec![])).is_err());
    }

    #[test]
    fn single_triangle_samples_stay_inside() {
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = sample_surface_raw(&mesh, 500, &mut rng).unwrap();
        for p in &ps.points {
            assert!(p[0] >= -1e-9 && p[1] >= -1e-9 && p[0] + p[1] <= 1.0 + 1e-9 && p[2] == 0.0);
        }
        assert!(sample_surface(&Mesh::default(), 5, &mut rng).is_err());
    }

    #[test]
    fn normalization_centres_and_scales() {
        let ps = PointSet::new(vec![[0.0, 0.0, 5.0], [2.0, 4.0, 5.0], [1.0, 8.0, 5.0]]).normalize();
        for a in 0..3 {
            let mean: f64 = ps.points.iter().map(|p| p[a]).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
        }
        assert!((ps.points.iter().map(|p| p[0].abs()).fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        assert!((ps.points.iter().map(|p| p[1].abs()).fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        assert!(ps.points.iter().all(|p| p[2] == 0.0));
    }

    #[test]
    fn empty_below_iso() {
        let mesh = marching_cubes_grid(&vec![0.0; 27], 3, 1.0);
        assert!(mesh.is_empty() && mesh.vertices.is_empty());
    }
}
