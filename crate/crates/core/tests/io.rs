mod common;

use common::{sphere, toy_shapes, wavy};
use raddiff_core::io::{
    analytic_field, load_field_expect, load_mask, load_training_set, make_synthetic_dataset, save_mask, save_scene,
    DatasetSpec, SceneManifest,
};
use raddiff_core::*;
use std::fs;
use std::path::Path;

fn two_view_scene(dir: &Path) {
    let f = analytic_field(&sphere("s", [0.3, 0.5, 0.7], 0.5), 8, [1.0; 3]);
    let spec = SpiralSpec {
        n_views: 2,
        width: 10,
        height: 8,
        ..Default::default()
    };
    save_scene(dir, &common::spiral_scene(&f, &spec)).unwrap();
}

fn edit_manifest(dir: &Path, edit: impl FnOnce(&mut SceneManifest)) {
    let path = dir.join("scene.json");
    let mut m: SceneManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    edit(&mut m);
    fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
}

#[test]
fn minimal_scene_loads() {
    let dir = tempfile::tempdir().unwrap();
    two_view_scene(dir.path());
    let scene = load_scene(dir.path()).unwrap();
    assert_eq!(scene.views.len(), 2);
    for v in &scene.views {
        assert_eq!((v.image.width, v.image.height), (10, 8));
        assert!(v.image.pixels.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
    }
    let via_file = load_scene(&dir.path().join("scene.json")).unwrap();
    assert_eq!(via_file, scene);
}

#[test]
fn reflected_rotation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    two_view_scene(dir.path());
    edit_manifest(dir.path(), |m| {
        for k in 0..3 {
            m.views[1].rotation[k] *= -1.0;
        }
    });
    let err = load_scene(dir.path()).unwrap_err();
    assert!(matches!(err, Error::NotOrthonormal(_)), "{err}");
}

#[test]
fn image_size_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    two_view_scene(dir.path());
    edit_manifest(dir.path(), |m| m.width = 12);
    let err = load_scene(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)), "{err}");
}

#[test]
fn missing_image_and_bad_json_have_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    two_view_scene(dir.path());
    fs::remove_file(dir.path().join("view_001.png")).unwrap();
    assert!(matches!(load_scene(dir.path()).unwrap_err(), Error::Io { .. }));
    fs::write(dir.path().join("scene.json"), "{\"width\": 3,").unwrap();
    assert!(matches!(load_scene(dir.path()).unwrap_err(), Error::Json { .. }));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_scene(empty.path()).unwrap_err(), Error::Io { .. }));
}

#[test]
fn field_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.vrf");
    let f = RadianceField::from_tensor(&wavy(5, 0.99, 0.3)).unwrap();
    save_field(&path, &f).unwrap();
    let g = load_field(&path).unwrap();
    assert_eq!(f.values().len(), g.values().len());
    assert!(f
        .values()
        .iter()
        .zip(g.values())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(load_field_expect(&path, 5).is_ok());
    assert!(matches!(
        load_field_expect(&path, 6).unwrap_err(),
        Error::FieldFormat { .. }
    ));
}

#[test]
fn field_file_length_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.vrf");
    save_field(&path, &RadianceField::zeros(32)).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 524_300);
    assert_eq!(&bytes[..4], b"VRF1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 32);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
}

#[test]
fn corrupted_field_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.vrf");
    save_field(&path, &RadianceField::zeros(4)).unwrap();
    let bytes = fs::read(&path).unwrap();

    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_field(&path).unwrap_err(), Error::Truncated { .. }));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load_field(&path).unwrap_err(), Error::FieldFormat { .. }));

    let mut long = bytes.clone();
    long.push(0);
    fs::write(&path, &long).unwrap();
    assert!(matches!(load_field(&path).unwrap_err(), Error::FieldFormat { .. }));
}

#[test]
fn mask_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vrf");
    let m = VoxelMask::from_fn(6, |p| p[1] < 0.2);
    save_mask(&path, &m).unwrap();
    assert_eq!(load_mask(&path).unwrap(), m);
}

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        resolution: 8,
        trajectory: SpiralSpec {
            n_views: 3,
            width: 8,
            height: 8,
            ..Default::default()
        },
        shapes: toy_shapes(),
        ..Default::default()
    }
}

#[test]
fn synthetic_dataset_has_one_scene_per_shape() {
    let dir = tempfile::tempdir().unwrap();
    let dirs = make_synthetic_dataset(&small_spec(), dir.path(), 1).unwrap();
    assert_eq!(dirs.len(), 4);
    for d in &dirs {
        assert!(d.join("scene.json").is_file());
        assert!(d.join("field.vrf").is_file());
    }
    let set = load_training_set(dir.path()).unwrap();
    assert_eq!(set.len(), 4);
    assert_eq!(
        set.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(),
        ["ball", "crate", "pair", "table"]
    );
}

#[test]
fn synthetic_dataset_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    make_synthetic_dataset(&small_spec(), a.path(), 7).unwrap();
    make_synthetic_dataset(&small_spec(), b.path(), 7).unwrap();
    for shape in ["ball", "table"] {
        for file in ["field.vrf", "scene.json", "view_002.png"] {
            let x = fs::read(a.path().join(shape).join(file)).unwrap();
            let y = fs::read(b.path().join(shape).join(file)).unwrap();
            assert_eq!(x, y, "{shape}/{file}");
        }
    }
}

#[test]
fn sphere_silhouette_matches_pinhole_projection() {
    let (r, d, focal, size) = (0.5, 2.5, 128.0, 128);
    let f = analytic_field(&sphere("s", [0.1, 0.1, 0.1], r), 32, [1.0; 3]);
    let cam = Camera::look_at([0.0, d, 0.0], [0.0; 3], focal, size, size).unwrap();
    let img = render_image(&f, &cam, &RenderConfig::default(), &ActivationConfig::default()).unwrap();
    let covered = img.alpha.iter().filter(|&&a| a > 0.5).count() as f64;
    let measured = (covered / std::f64::consts::PI).sqrt();
    let expected = focal * r / (d * d - r * r).sqrt();
    assert!(
        (measured - expected).abs() < 2.0,
        "radius {measured} px, expected {expected}"
    );
}
