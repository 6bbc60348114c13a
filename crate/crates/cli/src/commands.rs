use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use taxonet::dataset::{
    drop_labelled, load_manifest_file, patient_split, records_in, save_manifest, ImageRecord, Split, SplitSpec,
};
use taxonet::explain::gradcam;
use taxonet::labels::{consistency_report, propagate, write_targets_csv, LabelSet};
use taxonet::metrics::{per_label_report, subset_eval, EvalOptions};
use taxonet::model::{
    build_model, load_checkpoint, predict, targets_for, train, CheckpointMeta, InputSource, LabeledSet, Model,
    RecordSource,
};
use taxonet::imaging::InputCache;
use taxonet::plot::save_roc_svg;
use taxonet::predictions::PredictionMatrix;
use taxonet::synth::write_synthetic;
use taxonet::taxonomy::{load_taxonomy, NodeId, Taxonomy};
use taxonet::Error;

use crate::config::RunConfig;
use crate::{Cli, Command, GlobalOpts, TaxonomyAction};

struct Ctx {
    cfg: RunConfig,
    opts: GlobalOpts,
}

fn missing(what: &str, flag: &str) -> anyhow::Error {
    Error::InvalidInput(format!("no {what} given; pass {flag} or set it in --config")).into()
}

impl Ctx {
    fn taxonomy_path(&self) -> Result<PathBuf> {
        self.opts
            .taxonomy
            .clone()
            .or_else(|| self.cfg.taxonomy.clone())
            .ok_or_else(|| missing("taxonomy", "--taxonomy"))
    }

    fn taxonomy(&self) -> Result<Taxonomy> {
        let path = self.taxonomy_path()?;
        load_taxonomy(&path).with_context(|| format!("loading taxonomy {}", path.display()))
    }

    fn manifest(&self, taxonomy: &Taxonomy) -> Result<Vec<ImageRecord>> {
        let path = self
            .opts
            .manifest
            .clone()
            .or_else(|| self.cfg.manifest.clone())
            .ok_or_else(|| missing("manifest", "--manifest"))?;
        load_manifest_file(&path, taxonomy).with_context(|| format!("loading manifest {}", path.display()))
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.opts
            .out
            .clone()
            .or_else(|| self.cfg.output_dir.as_ref().map(|d| d.join(default)))
            .unwrap_or_else(|| PathBuf::from(default))
    }

    fn out_dir(&self, default: &str) -> Result<PathBuf> {
        let dir = self.out_or(default);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn seed(&self) -> u64 {
        self.opts.seed.unwrap_or(self.cfg.seed)
    }

    fn split_spec(&self) -> Result<SplitSpec> {
        let s = &self.cfg.split;
        Ok(SplitSpec::new(s.train, s.val, s.test, self.seed())?)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load_or_default(cli.global.config.as_deref())?;
    let mut ctx = Ctx { cfg, opts: cli.global };
    match cli.command {
        Command::Taxonomy { action } => cmd_taxonomy(&ctx, action),
        Command::Propagate => cmd_propagate(&ctx),
        Command::Synth { images, size } => cmd_synth(&ctx, images, size),
        Command::Split { train, val, test } => {
            let s = &mut ctx.cfg.split;
            s.train = train.unwrap_or(s.train);
            s.val = val.unwrap_or(s.val);
            s.test = test.unwrap_or(s.test);
            cmd_split(&ctx)
        }
        Command::Train { epochs } => {
            if let Some(e) = epochs {
                ctx.cfg.train.epochs = e;
            }
            cmd_train(&ctx)
        }
        Command::Predict { checkpoint, split } => cmd_predict(&ctx, &checkpoint, split.as_deref()),
        Command::Evaluate {
            predictions,
            n_boot,
            subsets,
        } => cmd_evaluate(&ctx, &predictions, n_boot, &subsets),
        Command::Explain {
            checkpoint,
            nodes,
            images,
            limit,
            layer,
        } => cmd_explain(&ctx, &checkpoint, &nodes, &images, limit, layer.as_deref()),
        Command::Consistency { predictions, threshold } => cmd_consistency(&ctx, &predictions, threshold),
    }
}

fn cmd_taxonomy(ctx: &Ctx, action: TaxonomyAction) -> Result<()> {
    let (file, action) = match action {
        TaxonomyAction::Validate { file } => (file, "validate"),
        TaxonomyAction::Show { file } => (file, "show"),
        TaxonomyAction::Index { file } => (file, "index"),
    };
    let path = match file {
        Some(f) => f,
        None => ctx.taxonomy_path()?,
    };
    let tax = load_taxonomy(&path).with_context(|| format!("invalid taxonomy {}", path.display()))?;
    match action {
        "validate" => println!(
            "OK, {} nodes ({} leaves, {} special)",
            tax.len(),
            tax.leaves().len(),
            tax.specials().len()
        ),
        "show" => print!("{}", tax.render_tree()),
        _ => {
            println!("index\tid\tgroup\tparent\tname");
            for (i, n) in tax.nodes().iter().enumerate() {
                println!(
                    "{i}\t{}\t{}\t{}\t{}",
                    n.id,
                    n.group.section_name(),
                    n.parent.as_ref().map(NodeId::as_str).unwrap_or("-"),
                    n.name
                );
            }
        }
    }
    Ok(())
}

fn cmd_propagate(ctx: &Ctx) -> Result<()> {
    let tax = ctx.taxonomy()?;
    let records = ctx.manifest(&tax)?;
    let rows = records
        .iter()
        .map(|r| Ok((r.image_id.clone(), propagate(&tax, &r.labels)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0usize; tax.len()];
    for (_, t) in &rows {
        for (c, b) in counts.iter_mut().zip(t.bits()) {
            *c += usize::from(*b);
        }
    }
    let mut summary = String::from("node_id\tpositives\n");
    for (n, c) in tax.nodes().iter().zip(&counts) {
        summary.push_str(&format!("{}\t{c}\n", n.id));
    }
    match &ctx.opts.out {
        Some(path) => {
            let f = std::io::BufWriter::new(std::fs::File::create(path)?);
            write_targets_csv(f, &tax, &rows)?;
            print!("{summary}");
        }
        None => {
            write_targets_csv(std::io::stdout().lock(), &tax, &rows)?;
            eprint!("{summary}");
        }
    }
    Ok(())
}

fn cmd_synth(ctx: &Ctx, images: Option<usize>, size: Option<usize>) -> Result<()> {
    let tax = ctx.taxonomy()?;
    let dir = ctx.out_dir("synth")?;
    let n = images.unwrap_or(ctx.cfg.synth.images);
    let size = size.unwrap_or(ctx.cfg.synth.size);
    let (records, boxes) = write_synthetic(&dir, &tax, n, size, ctx.seed())?;
    let records = patient_split(records, &ctx.split_spec()?)?;
    save_manifest(dir.join("manifest.csv"), &records)?;
    println!(
        "wrote {n} images ({} glyph boxes) to {}; splits train/val/test = {}/{}/{}",
        boxes.len(),
        dir.display(),
        records_in(&records, Split::Train).len(),
        records_in(&records, Split::Val).len(),
        records_in(&records, Split::Test).len()
    );
    Ok(())
}

fn cmd_split(ctx: &Ctx) -> Result<()> {
    let tax = ctx.taxonomy()?;
    let records = patient_split(ctx.manifest(&tax)?, &ctx.split_spec()?)?;
    let out = ctx.opts.out.clone().ok_or_else(|| missing("output manifest", "--out"))?;
    save_manifest(&out, &records)?;
    for s in Split::ALL {
        println!("{s}\t{}", records_in(&records, s).len());
    }
    Ok(())
}

/// Records used for training: `exclude`-labelled images dropped, missing
/// splits filled by a patient split.
fn training_records(ctx: &Ctx, tax: &Taxonomy) -> Result<Vec<ImageRecord>> {
    let mut records = ctx.manifest(tax)?;
    if let Ok(exclude) = NodeId::new("exclude") {
        if tax.index_of(&exclude).is_some() {
            records = drop_labelled(records, &exclude);
        }
    }
    if records.iter().any(|r| r.split.is_none()) {
        log::info!("manifest lacks splits; assigning patient-disjoint splits");
        records = patient_split(records, &ctx.split_spec()?)?;
    }
    Ok(records)
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let tax = ctx.taxonomy()?;
    let records = training_records(ctx, &tax)?;
    let dir = ctx.out_dir("train")?;
    let columns = tax.output_ids(ctx.cfg.include_specials);
    let mut model_cfg = ctx.cfg.model.clone();
    model_cfg.num_outputs = columns.len();
    let mut tc = ctx.cfg.train.clone();
    tc.seed = ctx.seed();

    let train_recs = records_in(&records, Split::Train);
    let val_recs = records_in(&records, Split::Val);
    let cache = InputCache::new(dir.join("cache"))?;
    let train_src = RecordSource::new(&train_recs, ctx.cfg.normalize).with_cache(cache.clone());
    let val_src = RecordSource::new(&val_recs, ctx.cfg.normalize).with_cache(cache);
    let train_set = LabeledSet::new(&train_src, targets_for(&tax, &train_recs, &columns)?)?;
    let val_set = LabeledSet::new(&val_src, targets_for(&tax, &val_recs, &columns)?)?;
    log::info!(
        "training on {} images, validating on {}, {} outputs",
        train_set.len(),
        val_set.len(),
        columns.len()
    );

    let model = build_model(&model_cfg, ctx.seed())?;
    let (best, history) = train(&model, &train_set, &val_set, &tc)?;
    let meta = CheckpointMeta::new(&best, &tax, columns, ctx.cfg.normalize)?;
    best.save_checkpoint(dir.join("model.ckpt"), &meta)?;
    history.save_csv(dir.join("history.csv"))?;
    save_manifest(dir.join("manifest.csv"), &records)?;
    let b = history.best();
    println!(
        "best epoch {} (val metric {}, val loss {:.4}); wrote {}",
        b.epoch,
        b.val_metric.map(|m| format!("{m:.4}")).unwrap_or_else(|| "undefined".into()),
        b.val_loss,
        dir.join("model.ckpt").display()
    );
    Ok(())
}

fn load_checked(path: &Path, tax: &Taxonomy) -> Result<(Model, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    meta.verify_taxonomy(tax)?;
    Ok((model, meta))
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(s.parse::<Split>()?)
}

fn cmd_predict(ctx: &Ctx, checkpoint: &Path, split: Option<&str>) -> Result<()> {
    let tax = ctx.taxonomy()?;
    let (model, meta) = load_checked(checkpoint, &tax)?;
    let mut records = ctx.manifest(&tax)?;
    if let Some(s) = split {
        records = records_in(&records, parse_split(s)?);
    }
    let src = RecordSource::new(&records, meta.normalize);
    let preds = predict(&model, &src, &meta.outputs, ctx.cfg.evaluate.batch_size)?;
    let out = ctx.out_or("predictions.csv");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    preds.save(&out)?;
    println!("wrote {} rows x {} columns to {}", preds.n_rows(), preds.n_cols(), out.display());
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, predictions: &Path, n_boot: Option<usize>, subsets: &[String]) -> Result<()> {
    let tax = ctx.taxonomy()?;
    let records = ctx.manifest(&tax)?;
    let preds = PredictionMatrix::load(predictions)
        .with_context(|| format!("loading predictions {}", predictions.display()))?;
    let truth: HashMap<String, LabelSet> = records.into_iter().map(|r| (r.image_id, r.labels)).collect();
    let opts = EvalOptions {
        n_boot: n_boot.unwrap_or(ctx.cfg.evaluate.n_boot),
        seed: ctx.seed(),
    };
    let report = per_label_report(&tax, &preds, &truth, &opts)?;
    let dir = ctx.out_dir("evaluation")?;
    report.save_csv(&tax, dir.join("report.csv"))?;
    report.write_roc_points(dir.join("roc"))?;
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let all: Vec<_> = report.per_node.iter().collect();
    save_roc_svg(plots.join("roc_all.svg"), "ROC, all nodes", &all)?;
    for r in report.per_node.iter().filter(|r| r.is_defined()) {
        save_roc_svg(plots.join(format!("{}.svg", r.node)), r.node.as_str(), &[r])?;
    }

    let mut out = std::io::stdout().lock();
    for r in &report.per_node {
        writeln!(out, "{}", taxonet::plot::legend_label(r))?;
    }
    writeln!(out, "{}", report.summary())?;

    if !subsets.is_empty() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("subsets.csv"))?);
        writeln!(f, "filter,target,support_pos,support_neg,auc,ci_low,ci_high")?;
        for spec in subsets {
            let (filter, target) = spec
                .split_once(':')
                .ok_or_else(|| Error::InvalidInput(format!("subset `{spec}` is not FILTER:TARGET")))?;
            let (filter, target) = (NodeId::new(filter)?, NodeId::new(target)?);
            let r = subset_eval(&tax, &preds, &truth, &filter, &target, &opts)?;
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            writeln!(
                f,
                "{filter},{target},{},{},{},{},{}",
                r.support_pos,
                r.support_neg,
                fmt(r.auc),
                fmt(r.ci.map(|c| c.0)),
                fmt(r.ci.map(|c| c.1))
            )?;
            writeln!(out, "subset {filter}: {}", taxonet::plot::legend_label(&r))?;
        }
        f.flush()?;
    }
    if report.avg_auc.is_none() {
        bail!(Error::Undefined("no node has both positive and negative images".into()));
    }
    Ok(())
}

fn cmd_explain(
    ctx: &Ctx,
    checkpoint: &Path,
    nodes: &[String],
    images: &[String],
    limit: usize,
    layer: Option<&str>,
) -> Result<()> {
    let tax = ctx.taxonomy()?;
    let (model, meta) = load_checked(checkpoint, &tax)?;
    let records = ctx.manifest(&tax)?;
    let chosen: Vec<ImageRecord> = if images.is_empty() {
        records.into_iter().take(limit).collect()
    } else {
        let by_id: HashMap<&str, &ImageRecord> = records.iter().map(|r| (r.image_id.as_str(), r)).collect();
        images
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| Error::InvalidInput(format!("image `{id}` is not in the manifest")))
            })
            .collect::<std::result::Result<_, _>>()?
    };
    let nodes = nodes.iter().map(|n| NodeId::new(n.as_str())).collect::<std::result::Result<Vec<_>, _>>()?;
    let dir = ctx.out_dir("explain")?;
    let src = RecordSource::new(&chosen, meta.normalize);
    for i in 0..src.len() {
        let input = src.load(i)?;
        let scores = model.predict_one(&input)?;
        for node in &nodes {
            let heat = gradcam(&model, &input, src.image_id(i), node, &meta.outputs, layer)?;
            let (hp, _) = heat.save(&dir, &input)?;
            let col = meta.outputs.iter().position(|o| o == node).expect("gradcam checked the node");
            println!("{}\t{node}\tscore {:.4}\t{}", src.image_id(i), scores[col], hp.display());
        }
    }
    Ok(())
}

fn cmd_consistency(ctx: &Ctx, predictions: &Path, threshold: f64) -> Result<()> {
    let tax = ctx.taxonomy()?;
    let preds = PredictionMatrix::load(predictions)
        .with_context(|| format!("loading predictions {}", predictions.display()))?;
    let report = consistency_report(&tax, &preds, threshold)?;
    let mut text = String::from("child,parent,violations,rate\n");
    for e in &report.edges {
        text.push_str(&format!("{},{},{},{:.6}\n", e.child, e.parent, e.violations, e.rate));
    }
    if let Some(out) = &ctx.opts.out {
        std::fs::write(out, &text)?;
    } else {
        print!("{text}");
    }
    println!(
        "threshold {threshold}: {} violations over {} (image, edge) pairs, rate {:.6}",
        report.violations, report.pairs, report.rate
    );
    Ok(())
}
