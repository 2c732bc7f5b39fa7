use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use geotab_core::config::{fnv1a64, KvConfig};
use geotab_core::data::{make_splits, sample_region, write_region, Split, SyntheticWorld};
use geotab_core::eval::{
    attention_locality, baseline_embeddings, embed::tract_input, extract_embeddings, fit_probe, pca, reconstruct,
    run_ablation, AblationAxis, BaselineKind, EmbeddingTable, ProbeSplit, StudyConfig,
};
use geotab_core::train::{
    joint_train, load_checkpoint, pretrain_vit, save_checkpoint, EpochRow, JointModel, RunOptions, TrainData,
    TrainReport,
};
use geotab_core::vision::sample_mask;

use crate::context::{Run, Settings};
use crate::{Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let s = Settings::load(cli.common.preset, cli.common.config.as_deref(), &cli.common.overrides)?;
    let run = Run {
        dir: cli.common.run_dir.clone(),
    };
    match cli.command {
        Command::Generate { seed, write_regions } => generate(&run, &s, seed.unwrap_or(s.seed), write_regions),
        Command::Pretrain { resume } => pretrain(&run, &s, resume),
        Command::Train {
            tabular_only,
            no_pretrain,
            resume,
        } => train(&run, &s, tabular_only, no_pretrain, resume),
        Command::Embed { table } => {
            let world = run.world()?;
            let t = table_for(&run, &s, &world, &table)?;
            let path = run.ensure("embeddings")?.join(format!("{table}.tsv"));
            t.save(&path)?;
            println!("{} rows x {} dims -> {}", t.len(), t.dim(), path.display());
            Ok(())
        }
        Command::Probe { table, split } => probe(&run, &s, &table, &split),
        Command::Pca { table, k } => pca_cmd(&run, &s, &table, k),
        Command::Reconstruct { tract, mask_seed } => reconstruct_cmd(&run, &s, tract, mask_seed),
        Command::Ablate { axis, grid, seeds } => ablate(&run, &s, &axis, grid.as_deref(), &seeds),
        Command::AttnStats { radius_km, regions } => attn_stats(&run, radius_km, regions),
    }
}

fn generate(run: &Run, s: &Settings, seed: u64, write_regions: bool) -> Result<()> {
    let world = SyntheticWorld::generate(&s.world, seed)?;
    let manifest = make_splits(&world, &s.split, seed)?;
    let dir = run.ensure("data")?;
    let mut kv = KvConfig::new();
    s.world.to_kv(&mut kv);
    kv.set("world.seed", seed);
    let mut files = vec![
        ("world.cfg".to_string(), kv.to_text().into_bytes()),
        ("manifest.txt".to_string(), manifest.to_text().into_bytes()),
        ("tracts.tsv".to_string(), tract_table(&world).into_bytes()),
    ];
    for (name, bytes) in &files {
        std::fs::write(dir.join(name), bytes)?;
    }
    if write_regions {
        run.ensure("data/regions")?;
        for (i, r) in manifest.regions.iter().enumerate() {
            let name = format!("regions/{i:05}_{}.gtrg", r.split.name());
            match sample_region(&world, r.center, manifest.region_km, s.model.vit.grid) {
                Ok(region) => write_region(&dir.join(&name), &region)?,
                Err(geotab_core::Error::TooFewTracts(_)) => continue,
                Err(e) => return Err(e.into()),
            }
            files.push((name.clone(), std::fs::read(dir.join(&name))?));
        }
    }
    let mut all = Vec::new();
    for (name, bytes) in &files {
        all.extend_from_slice(name.as_bytes());
        all.extend_from_slice(bytes);
    }
    println!(
        "world seed {seed}: {} tracts, {} train / {} val / {} holdout regions",
        world.n_tracts(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Holdout)
    );
    println!("checksum {:016x}", fnv1a64(&all));
    Ok(())
}

fn tract_table(world: &SyntheticWorld) -> String {
    let f = world.features.cols();
    let mut s = String::from("tract\tlon\tlat\tholdout\ttarget");
    for j in 0..f {
        s.push_str(&format!("\tf{j}"));
    }
    s.push('\n');
    for (t, tract) in world.tracts.iter().enumerate() {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}",
            tract.id, tract.rep_point.lon, tract.rep_point.lat, tract.holdout as u8, world.target[t]
        ));
        for v in world.features.row(t) {
            s.push_str(&format!("\t{v}"));
        }
        s.push('\n');
    }
    s
}

fn log_file(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_epochs(path: &Path, epochs: &[EpochRow], append: bool) -> Result<()> {
    let mut w = log_file(path, append)?;
    if !append {
        writeln!(
            w,
            "epoch\ttrain_L_vis\ttrain_L_tab\ttrain_L_joint\tval_L_vis\tval_L_tab\tval_L_joint"
        )?;
    }
    for e in epochs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.epoch, e.train.vis, e.train.tab, e.train.joint, e.val.vis, e.val.tab, e.val.joint
        )?;
    }
    Ok(())
}

fn report(name: &str, r: &TrainReport) {
    println!(
        "{name}: {} steps, val L_joint {:.5} -> {:.5} (L_vis {:.5} -> {:.5}, L_tab {:.5} -> {:.5}), {} regions skipped",
        r.state.step,
        r.init_val.joint,
        r.final_val.joint,
        r.init_val.vis,
        r.final_val.vis,
        r.init_val.tab,
        r.final_val.tab,
        r.skipped
    );
}

fn pretrain(run: &Run, s: &Settings, resume: bool) -> Result<()> {
    let world = run.world()?;
    let manifest = run.manifest(&world)?;
    let data = TrainData::build(&world, &manifest, &s.model)?;
    let ck = run.path("pretrain.ck");
    let (mut model, state) = if resume {
        let c = load_checkpoint(&ck, Some(&s.model))?;
        (c.model, c.state)
    } else {
        (JointModel::new(s.model.clone())?, None)
    };
    let mut log = log_file(&run.path("pretrain_log.tsv"), resume)?;
    let r = pretrain_vit(
        &mut model,
        &data,
        &s.pretrain,
        RunOptions {
            resume: state,
            log: Some(&mut log),
            epoch_validation: true,
            ..RunOptions::default()
        },
    )?;
    log.flush()?;
    write_epochs(&run.path("pretrain_epochs.tsv"), &r.epochs, resume)?;
    save_checkpoint(&ck, &model, Some(&r.state))?;
    report("pretrain", &r);
    Ok(())
}

fn train(run: &Run, s: &Settings, tabular_only: bool, no_pretrain: bool, resume: bool) -> Result<()> {
    let world = run.world()?;
    let manifest = run.manifest(&world)?;
    let mut cfg = s.model.clone();
    if tabular_only {
        cfg.fuse = false;
        cfg.tab.row_attention = false;
    }
    let data = TrainData::build(&world, &manifest, &cfg)?;
    let name = if tabular_only { "tabular_mae" } else { "model" };
    let ck = run.path(&format!("{name}.ck"));
    let (mut model, state) = if resume {
        let c = load_checkpoint(&ck, Some(&cfg))?;
        (c.model, c.state)
    } else {
        let mut m = JointModel::new(cfg)?;
        if !no_pretrain && !tabular_only {
            let p = load_checkpoint(&run.path("pretrain.ck"), None)?;
            m.copy_prefix(&p.model, "vit.")?;
        }
        (m, None)
    };
    let mut log = log_file(&run.path(&format!("{name}_log.tsv")), resume)?;
    let r = joint_train(
        &mut model,
        &data,
        &s.train,
        RunOptions {
            resume: state,
            log: Some(&mut log),
            epoch_validation: true,
            ..RunOptions::default()
        },
    )?;
    log.flush()?;
    write_epochs(&run.path(&format!("{name}_epochs.tsv")), &r.epochs, resume)?;
    save_checkpoint(&ck, &model, Some(&r.state))?;
    report(name, &r);
    Ok(())
}

/// A saved table when present, otherwise computed (model tables need their
/// checkpoint).
fn table_for(run: &Run, s: &Settings, world: &SyntheticWorld, name: &str) -> Result<EmbeddingTable> {
    let saved = run.path(&format!("embeddings/{name}.tsv"));
    if saved.exists() {
        let t = EmbeddingTable::load(&saved)?;
        if t.len() != world.n_tracts() {
            bail!(
                "{} has {} rows for {} tracts",
                saved.display(),
                t.len(),
                world.n_tracts()
            );
        }
        return Ok(t);
    }
    if name == "model" {
        let m = load_checkpoint(&run.path("model.ck"), None)?.model;
        return Ok(extract_embeddings(&m, world, &s.extract)?);
    }
    let kind = BaselineKind::parse(name)?;
    let tab = if kind == BaselineKind::LateFusion {
        Some(load_checkpoint(&run.path("tabular_mae.ck"), None)?.model)
    } else {
        None
    };
    Ok(baseline_embeddings(world, kind, tab.as_ref())?)
}

fn probe(run: &Run, s: &Settings, table: &str, split: &str) -> Result<()> {
    let world = run.world()?;
    let t = table_for(run, s, &world, table)?;
    let sp = match split {
        "random" => ProbeSplit::random(world.n_tracts(), s.test_fraction, s.probe_seed)?,
        "region" => ProbeSplit::region(&world)?,
        other => bail!("unknown split `{other}` (random or region)"),
    };
    let r = fit_probe(&t.values, &world.target, &sp, s.ridge)?;
    let path = run.ensure("probes")?.join(format!("{table}_{split}.txt"));
    std::fs::write(&path, format!("table = {table}\n{}", r.to_text()))?;
    println!("{table} {split}: R2 test {:.4} train {:.4}", r.r2_test, r.r2_train);
    Ok(())
}

fn pca_cmd(run: &Run, s: &Settings, table: &str, k: usize) -> Result<()> {
    let world = run.world()?;
    let t = table_for(run, s, &world, table)?;
    let r = pca(&t.values, k)?;
    if let Some(w) = &r.warning {
        eprintln!("warning: {w}");
    }
    let dir = run.ensure("pca")?;
    let mut ratios = String::from("component\texplained\n");
    for (i, e) in r.explained.iter().enumerate() {
        ratios.push_str(&format!("{i}\t{e}\n"));
    }
    std::fs::write(dir.join(format!("{table}_explained.tsv")), ratios)?;
    let mut scores = String::from("tract");
    for i in 0..r.explained.len() {
        scores.push_str(&format!("\tpc{i}"));
    }
    scores.push('\n');
    for (i, id) in t.ids.iter().enumerate() {
        scores.push_str(&id.to_string());
        for v in r.scores.row(i) {
            scores.push_str(&format!("\t{v:e}"));
        }
        scores.push('\n');
    }
    std::fs::write(dir.join(format!("{table}_scores.tsv")), scores)?;
    let shown: Vec<String> = r.explained.iter().map(|e| format!("{:.3}", e)).collect();
    println!("explained variance: {}", shown.join(" "));
    Ok(())
}

fn reconstruct_cmd(run: &Run, s: &Settings, tract: u64, mask_seed: u64) -> Result<()> {
    let world = run.world()?;
    let m = load_checkpoint(&run.path("model.ck"), None)?.model;
    let t = world
        .tracts
        .iter()
        .position(|t| t.id == tract)
        .with_context(|| format!("no tract {tract}"))?;
    let input = tract_input(&m, &world, t)?;
    let vp = sample_mask(input.n_patches(), s.train.vis_mask_ratio, mask_seed)?;
    let tp = sample_mask(input.n_tracts(), s.train.tab_mask_ratio, mask_seed ^ 1)?;
    let g = reconstruct(&m, &input, &vp, &tp)?;
    let path = run.ensure("reconstructions")?.join(format!("tract_{tract}.tsv"));
    std::fs::write(&path, g.to_text())?;
    println!(
        "{} masked of {} patches -> {}",
        vp.masked.len(),
        input.n_patches(),
        path.display()
    );
    Ok(())
}

fn ablate(run: &Run, s: &Settings, axis: &str, grid: Option<&str>, seeds: &str) -> Result<()> {
    let axis = AblationAxis::parse(axis)?;
    let grid: Vec<String> = match grid {
        Some(g) => g.split(',').map(|v| v.trim().to_string()).collect(),
        None => axis.default_grid(),
    };
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|v| v.trim().parse().with_context(|| format!("seed `{v}`")))
        .collect::<Result<_>>()?;
    let world = run.world()?;
    let manifest = run.manifest(&world)?;
    let data = TrainData::build(&world, &manifest, &s.model)?;
    let study = StudyConfig {
        model: s.model.clone(),
        pretrain: Some(s.pretrain.clone()),
        joint: s.train.clone(),
        test_fraction: s.test_fraction,
        ridge: s.ridge,
    };
    let report = run_ablation(&world, &data, &study, axis, &grid, &seeds)?;
    let path = run.ensure("ablations")?.join(format!("{}.tsv", axis.name()));
    std::fs::write(&path, report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn attn_stats(run: &Run, radius_km: f64, regions: usize) -> Result<()> {
    let world = run.world()?;
    let manifest = run.manifest(&world)?;
    let m = load_checkpoint(&run.path("model.ck"), None)?.model;
    let data = TrainData::build(&world, &manifest, &m.cfg)?;
    let n = regions.min(data.val.len());
    let stats = attention_locality(&m, &data.val[..n], radius_km)?;
    std::fs::write(run.path("attn_stats.txt"), stats.to_text())?;
    print!("{}", stats.to_text());
    Ok(())
}
