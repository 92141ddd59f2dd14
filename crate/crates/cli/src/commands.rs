use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use raddiff_core::io::{
    load_camera, load_cameras, load_mask, load_training_set, make_synthetic_dataset, save_mask, DatasetSpec,
};
use raddiff_core::{
    complete_masked, coverage, fit_field, load_field, load_scene, marching_cubes, masked_psnr, mmd, render_image,
    sample_guided, sample_surface, sample_unconditional, save_field, spiral_trajectory, Camera, DenoiserNet, Error,
    GuidanceTarget, Image, NoiseSchedule, PointSet, RadianceField, SpiralSpec, Trainer, VoxelMask,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{
    config_beside, usage, write_config, CompleteRun, EvalRun, FitRun, GuideRun, MeshRun, MpsnrRun, RenderRun,
    SampleRun, Sources, TrainRun,
};
use crate::model::{load_model, save_model, Model};
use crate::outputs::Outputs;

fn distinct(input: &Path, output: &Path) -> Result<()> {
    let same = match (input.canonicalize(), output.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => input == output,
    };
    if same {
        return Err(usage(format!("refusing to overwrite input {}", input.display())));
    }
    Ok(())
}

pub fn make_data(spec: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let spec: DatasetSpec = Sources {
        file: Some(spec.to_path_buf()),
        ..Default::default()
    }
    .resolve()?;
    let seed = seed.unwrap_or(0);
    let mut outputs = Outputs::new();
    outputs.dir(out)?;
    let dirs = make_synthetic_dataset(&spec, out, seed)?;
    write_config(
        &outputs.file(out.join("config.json")),
        &json!({ "seed": seed, "spec": spec }),
    )?;
    log::info!("wrote {} scenes to {}", dirs.len(), out.display());
    outputs.commit();
    Ok(())
}

pub fn fit(scene: &Path, out: &Path, src: Sources) -> Result<()> {
    let run: FitRun = src.resolve()?;
    let scene = load_scene(scene)?;
    let mut outputs = Outputs::new();
    let start = Instant::now();
    let result = fit_field(&scene, &run.fit_config(), run.seed)?;
    if let (Some(first), Some(last)) = (result.losses.first(), result.losses.last()) {
        log::info!("fit loss {first:.5} -> {last:.5} in {:.1?}", start.elapsed());
    }
    save_field(&outputs.file(out), &result.field)?;
    write_config(&outputs.file(config_beside(out)), &run)?;
    outputs.commit();
    Ok(())
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    #[serde(flatten)]
    run: &'a TrainRun,
    resolution: usize,
}

pub fn train(data: &Path, out: &Path, src: Sources, resume: bool) -> Result<()> {
    let run: TrainRun = src.resolve()?;
    let samples = load_training_set(data)?;
    let n = samples[0].field.resolution();
    if let Some(r) = run.resolution {
        if r != n {
            return Err(Error::Dimension(format!("config asks for resolution {r}, data has {n}")).into());
        }
    }
    log::info!("training on {} shapes at {n}^3", samples.len());

    let mut outputs = Outputs::new();
    outputs.dir(out)?;
    let ckpt = out.join("trainer.ckpt");
    let log_path = out.join("loss.csv");
    let mut trainer = if resume {
        let mut t = Trainer::load(&ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?;
        t.config.iterations = run.iterations;
        log::info!("resumed at step {}", t.step);
        t
    } else {
        let net = DenoiserNet::new(run.denoiser(), run.seed)?;
        net.config.check_resolution(n)?;
        log::info!("denoiser has {} parameters", net.parameter_count());
        Trainer::new(net, run.schedule().build()?, run.training())?
    };
    let record = TrainRecord {
        run: &run,
        resolution: n,
    };
    write_config(&outputs.file(out.join("config.json")), &record)?;

    let fresh_log = !resume || !log_path.exists();
    let mut csv = fs::OpenOptions::new()
        .create(true)
        .append(!fresh_log)
        .write(true)
        .truncate(fresh_log)
        .open(outputs.file(&log_path))
        .with_context(|| format!("opening {}", log_path.display()))?;
    if fresh_log {
        writeln!(csv, "step,loss_rf,loss_rgb,total")?;
    }

    let start = Instant::now();
    let save = |trainer: &Trainer| -> Result<()> {
        trainer.save(&ckpt)?;
        save_model(&out.join("model.ckpt"), &trainer.sampling_net(), &trainer.schedule, n)
    };
    outputs.file(&ckpt);
    outputs.file(out.join("model.ckpt"));
    while trainer.step < run.iterations {
        let step = trainer.step;
        let losses = trainer.step_on(&samples)?;
        writeln!(csv, "{step},{},{},{}", losses.loss_rf, losses.loss_rgb, losses.total)?;
        let done = step + 1;
        if run.log_every > 0 && (done % run.log_every == 0 || done == run.iterations) {
            log::info!(
                "step {done}/{}: loss_rf {:.5} loss_rgb {:.5} ({:.1?})",
                run.iterations,
                losses.loss_rf,
                losses.loss_rgb,
                start.elapsed()
            );
        }
        if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 {
            csv.flush()?;
            save(&trainer)?;
        }
    }
    csv.flush()?;
    save(&trainer)?;
    outputs.commit();
    Ok(())
}

fn sampling_schedule(model: &Model, variance: Option<raddiff_core::ReverseVariance>) -> Result<NoiseSchedule> {
    let s = model.schedule.build()?;
    Ok(match variance {
        Some(v) => s.with_variance(v),
        None => s,
    })
}

fn resolution_for(model: &Model, requested: Option<usize>) -> Result<usize> {
    let n = match (requested, model.resolution) {
        (Some(r), _) => r,
        (None, Some(r)) => r,
        (None, None) => return Err(usage("checkpoint does not record a resolution; pass --res")),
    };
    model.net.config.check_resolution(n)?;
    Ok(n)
}

fn turntable(n_views: usize, size: usize, radius: f64) -> Result<Vec<Camera>> {
    Ok(spiral_trajectory(&SpiralSpec {
        n_views,
        radius,
        pitch_lo_deg: 20.0,
        pitch_hi_deg: 20.0,
        turns: 1.0,
        width: size,
        height: size,
        ..Default::default()
    })?)
}

fn render_views(
    field: &RadianceField,
    cams: &[Camera],
    dir: &Path,
    run_render: &raddiff_core::RenderConfig,
    act: &raddiff_core::ActivationConfig,
    outputs: &mut Outputs,
) -> Result<()> {
    outputs.dir(dir)?;
    for (i, cam) in cams.iter().enumerate() {
        let img = render_image(field, cam, run_render, act)?.image;
        img.save_png(&outputs.file(dir.join(format!("view_{i:03}.png"))))?;
    }
    Ok(())
}

pub fn sample(ckpt: &Path, out: &Path, src: Sources) -> Result<()> {
    let run: SampleRun = src.resolve()?;
    let model = load_model(ckpt)?;
    let s = sampling_schedule(&model, run.variance)?;
    let n = resolution_for(&model, run.resolution)?;
    let mut outputs = Outputs::new();
    outputs.dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let cams = match run.turntable_views {
        0 => Vec::new(),
        v => turntable(v, run.image_size, 2.5)?,
    };
    for k in 0..run.count {
        let start = Instant::now();
        let field = sample_unconditional(&model.net, &s, n, &run.sampler(), &mut rng)?;
        let stem = format!("sample_{k:03}");
        save_field(&outputs.file(out.join(format!("{stem}.vrf"))), &field)?;
        if !cams.is_empty() {
            render_views(
                &field,
                &cams,
                &out.join(&stem),
                &run.render(),
                &run.activation(),
                &mut outputs,
            )?;
        }
        log::info!("sample {}/{} in {:.1?}", k + 1, run.count, start.elapsed());
    }
    write_config(&outputs.file(out.join("config.json")), &run)?;
    outputs.commit();
    Ok(())
}

pub fn complete(ckpt: &Path, input: &Path, mask: &Path, out: &Path, src: Sources) -> Result<()> {
    let run: CompleteRun = src.resolve()?;
    distinct(input, out)?;
    let model = load_model(ckpt)?;
    let s = sampling_schedule(&model, run.variance)?;
    let f_in = load_field(input)?;
    let mask = load_mask(mask)?;
    model.net.config.check_resolution(f_in.resolution())?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut outputs = Outputs::new();
    log::info!("completing {} of {} voxels", mask.masked_count(), mask.values().len());
    let field = complete_masked(&model.net, &s, &f_in, &mask, run.resample, &run.sampler(), &mut rng)?;
    save_field(&outputs.file(out), &field)?;
    write_config(&outputs.file(config_beside(out)), &run)?;
    outputs.commit();
    Ok(())
}

pub fn guide(ckpt: &Path, image: &Path, camera: &Path, fgmask: &Path, out: &Path, src: Sources) -> Result<()> {
    let run: GuideRun = src.resolve()?;
    let model = load_model(ckpt)?;
    let s = sampling_schedule(&model, run.variance)?;
    let n = resolution_for(&model, run.resolution)?;
    let image = Image::load_png(image)?;
    let fg = Image::load_png(fgmask)?;
    if (fg.width, fg.height) != (image.width, image.height) {
        return Err(Error::Dimension(format!(
            "foreground mask is {}x{}, image is {}x{}",
            fg.width, fg.height, image.width, image.height
        ))
        .into());
    }
    let foreground = fg
        .pixels
        .iter()
        .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2] > 0.5)
        .collect();
    let target = GuidanceTarget {
        camera: load_camera(camera)?,
        image,
        foreground,
        lambda: run.lambda,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut outputs = Outputs::new();
    let field = sample_guided(
        &model.net,
        &s,
        n,
        &target,
        &run.sampler(),
        &run.render(),
        &run.activation(),
        &mut rng,
    )?;
    save_field(&outputs.file(out), &field)?;
    write_config(&outputs.file(config_beside(out)), &run)?;
    outputs.commit();
    Ok(())
}

pub fn render(field: &Path, camera: Option<&Path>, out: &Path, src: Sources) -> Result<()> {
    let run: RenderRun = src.resolve()?;
    let f = load_field(field)?;
    let cams = match camera {
        Some(c) => load_cameras(c)?,
        None => turntable(run.views, run.image_size, run.radius)?,
    };
    let mut outputs = Outputs::new();
    render_views(&f, &cams, out, &run.render(), &run.activation(), &mut outputs)?;
    write_config(&outputs.file(out.join("config.json")), &run)?;
    log::info!("rendered {} views to {}", cams.len(), out.display());
    outputs.commit();
    Ok(())
}

pub fn mesh(field: &Path, out: &Path, src: Sources) -> Result<()> {
    let run: MeshRun = src.resolve()?;
    let act = run.activation();
    let iso = run.iso.unwrap_or_else(|| raddiff_core::geometry::default_iso(&act));
    let f = load_field(field)?;
    let mesh = marching_cubes(&f, iso, &act)?;
    if mesh.is_empty() {
        log::warn!("no surface at density {iso}; writing an empty mesh");
    }
    let mut outputs = Outputs::new();
    mesh.write_obj(&outputs.file(out))?;
    write_config(&outputs.file(config_beside(out)), &run)?;
    log::info!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
    outputs.commit();
    Ok(())
}

/// `*.vrf` files directly in `dir`, or `*/field.vrf` one level down.
fn field_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "vrf") {
            files.push(p);
        } else if p.join("field.vrf").is_file() {
            files.push(p.join("field.vrf"));
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no field files in {}", dir.display())).into());
    }
    Ok(files)
}

/// Every field's surface is sampled from a fresh generator with the same
/// seed, so identical fields give identical point sets.
fn point_sets(files: &[PathBuf], run: &EvalRun) -> Result<Vec<PointSet>> {
    let act = run.activation();
    let iso = run.iso.unwrap_or_else(|| raddiff_core::geometry::default_iso(&act));
    files
        .iter()
        .map(|p| {
            let mesh = marching_cubes(&load_field(p)?, iso, &act)?;
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
            sample_surface(&mesh, run.points, &mut rng)
                .with_context(|| format!("sampling the surface of {}", p.display()))
        })
        .collect()
}

pub fn eval(gen: &Path, reference: &Path, out: &Path, src: Sources) -> Result<()> {
    let run: EvalRun = src.resolve()?;
    let gen_files = field_files(gen)?;
    let ref_files = field_files(reference)?;
    let sg = point_sets(&gen_files, &run)?;
    let sr = point_sets(&ref_files, &run)?;
    let cd = raddiff_core::geometry::chamfer_matrix(&sg, &sr)?;
    let report = json!({
        "coverage": coverage(&sg, &sr)?,
        "mmd": mmd(&sg, &sr)?,
        "generated": gen_files,
        "reference": ref_files,
        "chamfer": cd,
        "config": run,
    });
    log::info!("COV {} MMD {}", report["coverage"], report["mmd"]);
    let mut outputs = Outputs::new();
    write_config(&outputs.file(out), &report)?;
    outputs.commit();
    Ok(())
}

pub fn eval_mpsnr(
    edited: &Path,
    original: &Path,
    mask: &Path,
    cameras: &Path,
    report: Option<&Path>,
    src: Sources,
) -> Result<()> {
    let run: MpsnrRun = src.resolve()?;
    let f_out = load_field(edited)?;
    let f_in = load_field(original)?;
    let m = load_mask(mask)?;
    let cams = load_cameras(cameras)?;
    let value = masked_psnr(&f_out, &f_in, &m, &cams, &run.render(), &run.activation())?;
    log::info!("masked PSNR {value:.3} dB over {} views", cams.len());
    if let Some(path) = report {
        let mut outputs = Outputs::new();
        write_config(
            &outputs.file(path),
            &json!({ "mpsnr": value, "views": cams.len(), "config": run }),
        )?;
        outputs.commit();
    }
    Ok(())
}

/// Writes a mask marking voxels inside the axis-aligned box `lo..hi`.
pub fn make_mask(resolution: usize, lo: [f64; 3], hi: [f64; 3], out: &Path) -> Result<()> {
    let m = VoxelMask::from_fn(resolution, |p| (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]));
    let mut outputs = Outputs::new();
    save_mask(&outputs.file(out), &m)?;
    log::info!("{} of {} voxels masked", m.masked_count(), m.values().len());
    outputs.commit();
    Ok(())
}
