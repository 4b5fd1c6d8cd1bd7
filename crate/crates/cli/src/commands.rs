use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use log::info;
use sacn::attention::export_attention;
use sacn::config::{Precision, RunConfig};
use sacn::data::manifest::Split;
use sacn::data::patches::{list_annotated, patch_dataset, synth_annotated};
use sacn::data::pgm::{from_unit, read_pgm, write_pgm};
use sacn::data::synth::{generate, SynthKind};
use sacn::data::{load_splits, manifest_per_image, read_dir, write_dir, AnnotatedImage, Splits};
use sacn::rng::derive_seed;
use sacn::train::ablate::ablate as run_ablation;
use sacn::train::gradcheck::{gradcheck as run_gradcheck, GradcheckOptions};
use sacn::train::{evaluate, Checkpoint, CsvWriter, MetricsRecord, TrainState};
use sacn::{Error, Real, Result, Rng, Tensor};

use crate::{GenKind, RunArgs};

fn resolve(args: &RunArgs, base: RunConfig) -> Result<RunConfig> {
    let mut c = match &args.preset {
        Some(p) => RunConfig::preset(p)?,
        None => base,
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        c.apply_text(&text)?;
    }
    for o in &args.overrides {
        c.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        c.seed = seed;
    }
    c.validate()?;
    Ok(c)
}

fn prepare_out(dir: &Path, c: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("resolved-config");
    std::fs::write(&path, c.to_text()).map_err(|e| Error::io(&path, e))
}

pub fn train(args: &RunArgs, resume: Option<&Path>) -> Result<()> {
    let (config, ckpt) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut base = ck.config.clone();
            if args.preset.is_some() {
                return Err(Error::InvalidArgument("--preset cannot be combined with --resume".into()));
            }
            for o in &args.overrides {
                base.apply_override(o)?;
            }
            if let Some(path) = &args.config {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                base.apply_text(&text)?;
            }
            base.validate()?;
            (base, Some(ck))
        }
        None => (resolve(args, RunConfig::preset("synthetic-simple")?)?, None),
    };
    prepare_out(&args.out, &config)?;
    let splits = load_splits(&config.data, &config.model, config.seed)?;
    info!(
        "data: {} train / {} val / {} test",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    match config.train.precision {
        Precision::F32 => train_with::<f32>(args, &config, ckpt.as_ref(), &splits),
        Precision::F64 => train_with::<f64>(args, &config, ckpt.as_ref(), &splits),
    }
}

fn train_with<T: Real>(args: &RunArgs, config: &RunConfig, ckpt: Option<&Checkpoint>, splits: &Splits) -> Result<()> {
    let mut st = match ckpt {
        Some(c) => {
            let mut st = TrainState::<T>::from_checkpoint(c)?;
            st.config = config.clone();
            st
        }
        None => TrainState::<T>::new(config)?,
    };
    let metrics_path = args.out.join("metrics.csv");
    let mut csv = if ckpt.is_some() && metrics_path.exists() {
        let f = OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        CsvWriter::append(BufWriter::new(f), !args.no_timing)
    } else {
        let f = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        CsvWriter::new(BufWriter::new(f), !args.no_timing)?
    };
    let ckpt_path = args.out.join("checkpoint.ckpt");
    let start = Instant::now();
    while !st.finished() {
        let report = st.run_epoch(splits, start, &mut |r: &MetricsRecord| csv.write(r))?;
        st.to_checkpoint().save(&ckpt_path)?;
        if report.stop {
            break;
        }
    }
    st.to_checkpoint().save(&ckpt_path)?;
    let batch = config.train.batch_size;
    let train = evaluate(&st.model, &splits.train, &config.loss, batch)?;
    println!("epochs {} steps {}", st.epoch, st.step);
    println!("train accuracy {:.4}", train.accuracy);
    if !splits.test.is_empty() {
        let test = evaluate(&st.model, &splits.test, &config.loss, batch)?;
        println!("test accuracy {:.4} (n = {})", test.accuracy, test.n);
    }
    if let Some(a) = &st.model.attention {
        println!("alpha {:.6}", a.alpha.data()[0].as_f64());
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

pub fn eval(checkpoint: &Path, split: &str, overrides: &[String], out: Option<&Path>) -> Result<()> {
    let split: Split = split.parse()?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut config = ck.config.clone();
    for o in overrides {
        config.apply_override(o)?;
    }
    config.validate()?;
    if let Some(dir) = out {
        prepare_out(dir, &config)?;
    }
    let splits = load_splits(&config.data, &config.model, config.seed)?;
    let data = splits.get(split);
    let batch = config.train.batch_size;
    let e = match config.train.precision {
        Precision::F32 => evaluate(&ck.model::<f32>()?, data, &config.loss, batch)?,
        Precision::F64 => evaluate(&ck.model::<f64>()?, data, &config.loss, batch)?,
    };
    let progress = ck.get("progress").map(|t| t.data.clone()).unwrap_or_default();
    let record = MetricsRecord {
        step: progress.get(1).copied().unwrap_or(0.0) as usize,
        epoch: progress.first().copied().unwrap_or(0.0) as usize,
        split: split.to_string(),
        l_m: e.l_m,
        l_r: e.l_r,
        l_t: e.l_t,
        accuracy: e.accuracy,
        seconds: 0.0,
    };
    println!("{}", sacn::train::metrics::CSV_HEADER);
    println!("{}", record.csv_row(false));
    if let Some(dir) = out {
        let path = dir.join("eval.csv");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        CsvWriter::new(BufWriter::new(f), false)?.write(&record)?;
    }
    Ok(())
}

pub fn gradcheck(args: &RunArgs, routing: Vec<usize>, eps: f64, threshold: f64) -> Result<()> {
    let config = resolve(args, RunConfig::preset("mini")?)?;
    prepare_out(&args.out, &config)?;
    let opts = GradcheckOptions {
        routing_iters: routing,
        eps,
        threshold,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&config, &opts)?;
    let text = report.to_text();
    print!("{text}");
    let path = args.out.join("gradcheck.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    if report.passed() {
        println!("all {} groups below {threshold:e}", report.groups.len());
        Ok(())
    } else {
        let names: Vec<String> = report
            .failing()
            .iter()
            .map(|g| format!("{} (routing {})", g.group, g.routing_iters))
            .collect();
        Err(Error::CheckFailed(format!(
            "gradient error above threshold for {}",
            names.join(", ")
        )))
    }
}

pub fn ablate(args: &RunArgs, k: usize, min_gap: Option<f64>) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let config = resolve(args, RunConfig::preset("synthetic-complex")?)?;
    prepare_out(&args.out, &config)?;
    let report = match config.train.precision {
        Precision::F32 => run_ablation::<f32>(&config, k)?,
        Precision::F64 => run_ablation::<f64>(&config, k)?,
    };
    let text = report.to_text();
    print!("{text}");
    println!("gap {:+.4}", report.gap());
    let path = args.out.join("ablation.tsv");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    match min_gap {
        Some(m) if report.gap() < m => Err(Error::CheckFailed(format!(
            "SACN − baseline gap {:+.4} is below the required {m:+.4}",
            report.gap()
        ))),
        _ => Ok(()),
    }
}

fn parse_location(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("location must be ROW,COL, got `{s}`"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

pub fn export_attn(checkpoint: &Path, image: &Path, locations: &[String], out: &Path) -> Result<()> {
    let locations = locations.iter().map(|s| parse_location(s)).collect::<Result<Vec<_>>>()?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model::<f64>()?;
    if model.attention.is_none() {
        return Err(Error::Config("checkpoint holds a baseline model without attention".into()));
    }
    let geo = model.geometry();
    for &(r, c) in &locations {
        if r >= geo.feature_h || c >= geo.feature_w {
            return Err(Error::InvalidArgument(format!(
                "location {r},{c} outside the {}×{} feature grid",
                geo.feature_h, geo.feature_w
            )));
        }
    }
    let pgm = read_pgm(image)?;
    let m = &model.config;
    if m.in_channels != 1 || (pgm.height, pgm.width) != (m.height, m.width) {
        return Err(Error::Data(format!(
            "{}: {}×{} image, model expects {} channel(s) of {}×{}",
            image.display(),
            pgm.height,
            pgm.width,
            m.in_channels,
            m.height,
            m.width
        )));
    }
    let pixels: Vec<f64> = pgm.to_unit().iter().map(|&v| v as f64).collect();
    let x = Tensor::new(&[1, 1, m.height, m.width], pixels)?;
    let fwd = model.forward(&x, &ck.config.loss)?;
    let beta = fwd.attention.expect("attention model").beta;
    let n = geo.feature_h * geo.feature_w;
    let beta = beta.reshape(&[n, n])?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (r, c) in locations {
        let map = export_attention(&beta, r * geo.feature_w + c, geo.feature_h, geo.feature_w)?;
        let path = out.join(format!("attn_r{r}_c{c}.pgm"));
        write_pgm(&path, &from_unit(geo.feature_w, geo.feature_h, &map))?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn synth_gen(kind: GenKind, n: usize, seed: u64, height: Option<usize>, width: Option<usize>, out: &Path) -> Result<()> {
    let default = if kind == GenKind::Annotated { 64 } else { 16 };
    let (h, w) = (height.unwrap_or(default), width.unwrap_or(default));
    if kind == GenKind::Annotated {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        for i in 0..n {
            let name = format!("img{i:03}");
            let mut rng = Rng::derived(seed, &format!("annotated.{name}"));
            synth_annotated(&name, h, w, &mut rng).save(out)?;
        }
        println!("{n} annotated images in {}", out.display());
        return Ok(());
    }
    let sk = if kind == GenKind::Simple { SynthKind::Simple } else { SynthKind::Complex };
    let samples = generate(sk, n, h, w, &mut Rng::derived(seed, "data.synth"))?;
    let manifest = manifest_per_image(&samples, derive_seed(seed, "data.split"))?;
    write_dir(out, &samples, &manifest)?;
    println!("{n} samples in {}", out.display());
    Ok(())
}

pub fn extract_patches(images: &Path, per_region: usize, seed: u64, no_split: bool, out: &Path) -> Result<()> {
    let names = list_annotated(images)?;
    if names.is_empty() {
        return Err(Error::Data(format!("{}: no annotated images found", images.display())));
    }
    let imgs = names
        .iter()
        .map(|n| AnnotatedImage::load(images, n))
        .collect::<Result<Vec<_>>>()?;
    let (samples, mut manifest) = patch_dataset(&imgs, per_region, seed)?;
    if !no_split {
        manifest.assign_splits(derive_seed(seed, "data.split"))?;
    }
    write_dir(out, &samples, &manifest)?;
    println!("{} patches from {} images in {}", samples.len(), imgs.len(), out.display());
    Ok(())
}

pub fn split(dir: &Path, seed: u64) -> Result<()> {
    let (_, mut manifest) = read_dir(dir)?;
    manifest.assign_splits(derive_seed(seed, "data.split"))?;
    manifest.write(&dir.join(sacn::data::DIR_MANIFEST))?;
    let [tr, va, te] = manifest.source_counts();
    println!("sources train {tr} val {va} test {te}");
    Ok(())
}

pub fn inspect(dir: &Path) -> Result<()> {
    let (samples, manifest) = read_dir(dir)?;
    println!(
        "samples {} ({}×{}×{})",
        samples.len(),
        samples.channels,
        samples.height,
        samples.width
    );
    let classes: Vec<String> = samples
        .class_counts()
        .iter()
        .enumerate()
        .map(|(k, n)| format!("{k}:{n}"))
        .collect();
    println!("classes {}", classes.join(" "));
    println!("sources {}", manifest.sources().len());
    let [tr, va, te] = manifest.split_counts();
    let unassigned = manifest.entries.len() - tr - va - te;
    println!("split samples train {tr} val {va} test {te} unassigned {unassigned}");
    let [tr, va, te] = manifest.source_counts();
    println!("split sources train {tr} val {va} test {te}");
    let leaks = manifest.leaking_sources();
    println!("leaking sources {}", leaks.len());
    for l in leaks {
        println!("  {l}");
    }
    Ok(())
}
