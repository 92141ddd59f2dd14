//! On-disk formats: scene manifests, binary voxel grids, camera files and
//! procedural datasets.
//!
//! Grid files are `VRF1`, then little-endian `u32` resolution and `u32`
//! channel count, then `channels·N³` little-endian `f32` values in
//! `[channel, z, y, x]` order.

use std::fs;
use std::path::{Path, PathBuf};

use raddiff_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{spiral_trajectory, Camera, SpiralSpec};
use crate::diffusion::TrainingSample;
use crate::error::{Error, Result};
use crate::field::{ActivationConfig, RadianceField, CHANNELS};
use crate::render::{render_image, Image, RenderConfig};
use crate::sampler::VoxelMask;
use crate::vec3::{self, Vec3};

pub const FIELD_MAGIC: &[u8; 4] = b"VRF1";
const HEADER_LEN: usize = 12;
/// Rotations read from disk only need to be orthonormal to this tolerance.
const MANIFEST_ROTATION_TOL: f64 = 1e-4;
pub const MANIFEST_NAME: &str = "scene.json";
pub const FIELD_NAME: &str = "field.vrf";

#[derive(Clone, Debug, PartialEq)]
pub struct PosedImage {
    pub camera: Camera,
    pub image: Image,
}

/// A set of posed images of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub views: Vec<PosedImage>,
    pub background: Option<[f64; 3]>,
}

impl Scene {
    /// Checks that the scene is nonempty and every image matches its camera
    /// and the first image's size.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .views
            .first()
            .ok_or_else(|| Error::Empty("scene has no views".into()))?;
        let (w, h) = (first.image.width, first.image.height);
        for (i, v) in self.views.iter().enumerate() {
            if v.image.width != w || v.image.height != h {
                return Err(Error::Dimension(format!(
                    "view {i} is {}x{}, view 0 is {w}x{h}",
                    v.image.width, v.image.height
                )));
            }
            if v.camera.width() != w || v.camera.height() != h {
                return Err(Error::Dimension(format!(
                    "view {i} camera is {}x{} but its image is {w}x{h}",
                    v.camera.width(),
                    v.camera.height()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub file: PathBuf,
    pub position: Vec3,
    /// Camera-to-world, row-major.
    pub rotation: [f64; 9],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<[f64; 3]>,
}

fn unflatten(r: &[f64; 9]) -> [[f64; 3]; 3] {
    [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]]
}

fn flatten(r: &[[f64; 3]; 3]) -> [f64; 9] {
    [
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    ]
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Resolves a scene path: either a manifest file or a directory holding
/// `scene.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

/// Loads a scene manifest and decodes its images to `[0, 1]`.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let manifest_file = manifest_path(path);
    let manifest: SceneManifest = read_json(&manifest_file)?;
    let root = manifest_file.parent().unwrap_or(Path::new("."));
    let mut views = Vec::with_capacity(manifest.views.len());
    for (i, v) in manifest.views.iter().enumerate() {
        let camera = Camera::with_tolerance(
            v.position,
            unflatten(&v.rotation),
            manifest.focal,
            manifest.width,
            manifest.height,
            MANIFEST_ROTATION_TOL,
        )
        .map_err(|e| match e {
            Error::NotOrthonormal(msg) => Error::NotOrthonormal(format!("view {i}: {msg}")),
            other => other,
        })?;
        let file = root.join(&v.file);
        if !file.exists() {
            return Err(Error::io(&file, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let image = Image::load_png(&file)?;
        if image.width != manifest.width || image.height != manifest.height {
            return Err(Error::Dimension(format!(
                "{} is {}x{}, manifest declares {}x{}",
                file.display(),
                image.width,
                image.height,
                manifest.width,
                manifest.height
            )));
        }
        views.push(PosedImage { camera, image });
    }
    let scene = Scene {
        views,
        background: manifest.background,
    };
    scene.validate()?;
    Ok(scene)
}

/// Writes `scene.json` and one PNG per view into `dir`.
pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    scene.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = &scene.views[0].camera;
    let mut entries = Vec::with_capacity(scene.views.len());
    for (i, v) in scene.views.iter().enumerate() {
        if v.camera.focal() != first.focal() {
            return Err(Error::Config("manifest cameras must share one focal length".into()));
        }
        let file = PathBuf::from(format!("view_{i:03}.png"));
        v.image.save_png(&dir.join(&file))?;
        entries.push(ViewEntry {
            file,
            position: v.camera.position(),
            rotation: flatten(v.camera.rotation()),
        });
    }
    let manifest = SceneManifest {
        width: first.width(),
        height: first.height(),
        focal: first.focal(),
        views: entries,
        background: scene.background,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)
}

/// Single-camera JSON, as consumed by `render`, `guide` and `eval-mpsnr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub position: Vec3,
    pub rotation: [f64; 9],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraFile {
    pub fn from_camera(cam: &Camera) -> Self {
        Self {
            position: cam.position(),
            rotation: flatten(cam.rotation()),
            focal: cam.focal(),
            width: cam.width(),
            height: cam.height(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        Camera::with_tolerance(
            self.position,
            unflatten(&self.rotation),
            self.focal,
            self.width,
            self.height,
            MANIFEST_ROTATION_TOL,
        )
    }
}

pub fn load_camera(path: &Path) -> Result<Camera> {
    read_json::<CameraFile>(path)?.to_camera()
}

pub fn save_camera(path: &Path, cam: &Camera) -> Result<()> {
    write_json(path, &CameraFile::from_camera(cam))
}

/// Reads a camera file holding either one camera object or a list of them.
pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(CameraFile),
        Many(Vec<CameraFile>),
    }
    match read_json::<OneOrMany>(path)? {
        OneOrMany::One(c) => Ok(vec![c.to_camera()?]),
        OneOrMany::Many(cs) => cs.iter().map(CameraFile::to_camera).collect(),
    }
}

pub fn write_grid(path: &Path, resolution: usize, channels: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), channels * resolution.pow(3), "grid length");
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    bytes.extend_from_slice(FIELD_MAGIC);
    bytes.extend_from_slice(&(resolution as u32).to_le_bytes());
    bytes.extend_from_slice(&(channels as u32).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a grid file, returning its resolution and values.
pub fn read_grid(path: &Path, channels: usize) -> Result<(usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::FieldFormat {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != FIELD_MAGIC {
        return Err(bad(format!("magic {:?} is not VRF1", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (n, c) = (word(4), word(8));
    if c != channels {
        return Err(bad(format!("expected {channels} channels, found {c}")));
    }
    if n == 0 {
        return Err(bad("resolution 0".into()));
    }
    let expected = HEADER_LEN + 4 * c * n.pow(3);
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(bad(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok((n, values))
}

pub fn save_field(path: &Path, f: &RadianceField) -> Result<()> {
    write_grid(path, f.resolution(), CHANNELS, f.values())
}

pub fn load_field(path: &Path) -> Result<RadianceField> {
    let (n, values) = read_grid(path, CHANNELS)?;
    RadianceField::new(n, values)
}

/// Like [`load_field`] but rejects any resolution other than `n`.
pub fn load_field_expect(path: &Path, n: usize) -> Result<RadianceField> {
    let f = load_field(path)?;
    if f.resolution() != n {
        return Err(Error::FieldFormat {
            path: path.to_path_buf(),
            reason: format!("resolution {} where {n} was expected", f.resolution()),
        });
    }
    Ok(f)
}

pub fn save_mask(path: &Path, m: &VoxelMask) -> Result<()> {
    let values: Vec<f32> = m.values().iter().map(|&v| v as f32).collect();
    write_grid(path, m.resolution(), 1, &values)
}

pub fn load_mask(path: &Path) -> Result<VoxelMask> {
    let (n, values) = read_grid(path, 1)?;
    let mut bits = Vec::with_capacity(values.len());
    for v in values {
        bits.push(match v {
            v if v == 0.0 => 0,
            v if v == 1.0 => 1,
            other => {
                return Err(Error::FieldFormat {
                    path: path.to_path_buf(),
                    reason: format!("mask value {other} is not 0 or 1"),
                })
            }
        });
    }
    VoxelMask::new(n, bits)
}

const ARCHIVE_MAGIC: &[u8; 4] = b"RDA1";

/// Writes named tensors as little-endian `f32` after a JSON header holding
/// `header` and each tensor's name and shape.
pub fn write_archive(path: &Path, header: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let index: Vec<serde_json::Value> = tensors
        .iter()
        .map(|(name, t)| serde_json::json!({ "name": name, "shape": t.shape() }))
        .collect();
    let json = serde_json::to_vec(&serde_json::json!({ "header": header, "tensors": index })).expect("json");
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut bytes = Vec::with_capacity(8 + json.len() + 4 * total);
    bytes.extend_from_slice(ARCHIVE_MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in tensors {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    #[derive(Deserialize)]
    struct Entry {
        name: String,
        shape: Vec<usize>,
    }
    #[derive(Deserialize)]
    struct Index {
        header: serde_json::Value,
        tensors: Vec<Entry>,
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::FieldFormat {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 || &bytes[..4] != ARCHIVE_MAGIC {
        return Err(bad("not a checkpoint archive".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        expected: 8 + len,
        found: bytes.len(),
    })?;
    let index: Index = serde_json::from_slice(json).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let total: usize = index.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let expected = 8 + len + 4 * total;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let mut floats = bytes[8 + len..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
    let mut out = Vec::with_capacity(index.tensors.len());
    for e in index.tensors {
        let n: usize = e.shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        out.push((e.name, Tensor::new(&e.shape, data)?));
    }
    Ok((index.header, out))
}

/// Loads every subdirectory of `dir` that holds both a scene manifest and a
/// field file, in name order.
pub fn load_training_set(dir: &Path) -> Result<Vec<TrainingSample>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_NAME).is_file() && p.join(FIELD_NAME).is_file())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Empty(format!(
            "{} has no subdirectories with {MANIFEST_NAME} and {FIELD_NAME}",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(entries.len());
    for p in entries {
        let name = p
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let field = load_field(&p.join(FIELD_NAME))?;
        let scene = load_scene(&p)?;
        samples.push(TrainingSample::new(name, field, scene)?);
    }
    let n = samples[0].field.resolution();
    if let Some(s) = samples.iter().find(|s| s.field.resolution() != n) {
        return Err(Error::Dimension(format!(
            "{} has resolution {}, expected {n}",
            s.name,
            s.field.resolution()
        )));
    }
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half_extents: Vec3 },
}

impl Primitive {
    /// Signed distance, negative inside.
    pub fn sdf(&self, p: Vec3) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => vec3::norm(vec3::sub(p, *center)) - radius,
            Primitive::Box { center, half_extents } => {
                let q: Vec3 = std::array::from_fn(|i| (p[i] - center[i]).abs() - half_extents[i]);
                let outside = vec3::norm(q.map(|c| c.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
        }
    }
}

/// A union of primitives with one colour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub name: String,
    pub color: [f64; 3],
    pub primitives: Vec<Primitive>,
}

impl ShapeSpec {
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.primitives.iter().map(|q| q.sdf(p)).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub resolution: usize,
    pub trajectory: SpiralSpec,
    /// Randomize each shape's spiral start azimuth from the seed.
    pub random_azimuth: bool,
    pub render: RenderConfig,
    pub activation: ActivationConfig,
    pub shapes: Vec<ShapeSpec>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            resolution: 32,
            trajectory: SpiralSpec::default(),
            random_azimuth: true,
            render: RenderConfig::default(),
            activation: ActivationConfig::default(),
            shapes: Vec::new(),
        }
    }
}

/// Builds the pre-activated field of a shape: occupancy ramps from 1 to 0
/// over one voxel across the surface, density pre-activation is `2o − 1`
/// and colour blends from the shape colour to `background`.
pub fn analytic_field(shape: &ShapeSpec, n: usize, background: [f64; 3]) -> RadianceField {
    let mut f = RadianceField::zeros(n);
    let h = 2.0 / n as f64;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = f.vertex_position(z, y, x);
                let o = (0.5 - shape.sdf(p) / h).clamp(0.0, 1.0);
                f.set(0, z, y, x, (2.0 * o - 1.0) as f32);
                for c in 0..3 {
                    let col = o * shape.color[c] + (1.0 - o) * background[c];
                    f.set(c + 1, z, y, x, (2.0 * col - 1.0) as f32);
                }
            }
        }
    }
    f
}

/// Writes one directory per shape holding the analytic field, spiral renders
/// and a manifest. Returns the scene directories.
pub fn make_synthetic_dataset(spec: &DatasetSpec, out: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    if spec.shapes.is_empty() {
        return Err(Error::Empty("dataset spec lists no shapes".into()));
    }
    spec.render.validate()?;
    spec.activation.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = Vec::with_capacity(spec.shapes.len());
    for shape in &spec.shapes {
        if shape.name.is_empty() || shape.name.contains(['/', '\\']) || shape.name.starts_with('.') {
            return Err(Error::Config(format!(
                "shape name {:?} is not a plain directory name",
                shape.name
            )));
        }
        let mut trajectory = spec.trajectory.clone();
        if spec.random_azimuth {
            trajectory.azimuth_offset_deg = rng.gen_range(0.0..360.0);
        }
        let field = analytic_field(shape, spec.resolution, spec.render.background);
        let mut views = Vec::with_capacity(trajectory.n_views);
        for camera in spiral_trajectory(&trajectory)? {
            let image = render_image(&field, &camera, &spec.render, &spec.activation)?.image;
            views.push(PosedImage { camera, image });
        }
        let dir = out.join(&shape.name);
        save_scene(
            &dir,
            &Scene {
                views,
                background: Some(spec.render.background),
            },
        )?;
        save_field(&dir.join(FIELD_NAME), &field)?;
        dirs.push(dir);
    }
    Ok(dirs)
}
