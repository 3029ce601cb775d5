//! Command-line front end. Every stage reads a dataset manifest and writes
//! its outputs under `--out`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use tinyobs::config::PipelineConfig;
use tinyobs::edges::{enhance_edges, save_edge_map};
use tinyobs::eval::{
    pixel_roc, recall_by_count, recall_by_iou, tpr_at_fpr, write_recall_csv, write_roc_csv, RankedImage, AR_IOU_PERCENT,
};
use tinyobs::features::{FeatureContext, FEATURE_NAMES};
use tinyobs::manifest::{DatasetManifest, ManifestRecord, Split};
use tinyobs::masks::SceneMasks;
use tinyobs::mlregions::{fit_regions, MLRegionSet};
use tinyobs::model::TrainedModel;
use tinyobs::pipeline::{
    describe_all, finish_image, load_record, load_split, manifest_annotations, predict_image, propose, rank_proposals,
    read_ranked_boxes, train, write_proposal_rows, ProposalRow,
};
use tinyobs::probmap::{mask_image, threshold_mask, ProbabilityMap};
use tinyobs::render::{render_boxes, render_heat, BOX_COLOR};
use tinyobs::synth::{synth_generate, SynthParams};
use tinyobs::{Error, Result};

/// FPR levels always reported in `roc_summary.csv`.
const SUMMARY_FPRS: [f64; 6] = [0.005, 0.01, 0.015, 0.02, 0.025, 0.03];

#[derive(Parser)]
#[command(name = "tinyobs", version, about = "Tiny-obstacle discovery on monocular road images")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sample proposals from layers 1..=k only.
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true, value_parser = clap::value_parser!(bool))]
    multistride: Option<bool>,
    /// `false` selects the ORDR-only variant.
    #[arg(long, global = true, value_parser = clap::value_parser!(bool))]
    fusion: Option<bool>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn matches(self, s: Split) -> bool {
        match self {
            SplitArg::Train => s == Split::Train,
            SplitArg::Test => s == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit ML regions on the training split; writes regions.json.
    Regions,
    /// Generate a synthetic dataset; writes manifest.json, images/, labels/, obstacles/.
    Synth {
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
    },
    /// Baseline (or file) edge maps; writes edges/<id>.png, plus enhanced/<id>.png when regions are known.
    Edges {
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
    },
    /// Ranked initial proposals; writes proposals.csv.
    Proposals {
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Feature vectors of the scored proposals; writes features.csv.
    Features {
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Train both regressors; writes model.json and regions.json.
    Train {
        #[arg(long)]
        regions: Option<PathBuf>,
    },
    /// Score proposals and build probability maps; writes maps/, masks/, scores.csv.
    Infer {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Pixel ROC of probability maps; writes roc.csv and roc_summary.csv.
    EvalRoc {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Instance recall of ranked boxes; writes recall_by_count.csv, recall_by_iou.csv, ar.csv.
    EvalRecall {
        /// proposals.csv or scores.csv.
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Heat and box overlays; writes overlays/<id>.png.
    Render {
        #[arg(long)]
        maps: Option<PathBuf>,
        #[arg(long)]
        proposals: Option<PathBuf>,
        /// Boxes drawn per image.
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
}

struct Ctx {
    cfg: PipelineConfig,
    common: Common,
}

fn missing(flag: &str) -> Error {
    Error::Config(format!("--{flag} is required for this command"))
}

impl Ctx {
    fn new(common: Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(l) = common.layers {
            cfg.proposals.layers = Some(l);
        }
        if let Some(m) = common.multistride {
            cfg.proposals.multistride = m;
        }
        if let Some(f) = common.fusion {
            cfg.fusion.enabled = f;
        }
        cfg.validate()?;
        Ok(Self { cfg, common })
    }

    fn out(&self) -> Result<PathBuf> {
        let out = self.common.out.clone().ok_or_else(|| missing("out"))?;
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(out)
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out()?.join(name);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::load(self.common.manifest.as_deref().ok_or_else(|| missing("manifest"))?)
    }

    fn model(&self) -> Result<TrainedModel> {
        TrainedModel::load(self.common.model.as_deref().ok_or_else(|| missing("model"))?)
    }

    /// Regions from `--regions`, else from `--model`, else fitted on the
    /// training split.
    fn regions(&self, manifest: &DatasetManifest, explicit: Option<&Path>) -> Result<MLRegionSet> {
        if let Some(p) = explicit {
            return MLRegionSet::load(p);
        }
        if self.common.model.is_some() {
            return Ok(self.model()?.regions);
        }
        self.fit_regions(manifest)
    }

    fn fit_regions(&self, manifest: &DatasetManifest) -> Result<MLRegionSet> {
        fit_regions(&manifest_annotations(manifest, Split::Train)?, self.cfg.regions.k, self.cfg.seed)
    }
}

fn records(manifest: &DatasetManifest, split: SplitArg) -> Vec<&ManifestRecord> {
    manifest.records.iter().filter(|r| split.matches(r.split)).collect()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(cli.common)?;
    let cfg = &ctx.cfg;
    match cli.cmd {
        Cmd::Synth { n_train, n_test } => {
            let out = ctx.out()?;
            let m = synth_generate(&out, n_train, n_test, cfg.seed, &SynthParams::default())?;
            info!("wrote {} scenes to {}", m.records.len(), out.display());
        }
        Cmd::Regions => {
            let m = ctx.manifest()?;
            let regions = ctx.fit_regions(&m)?;
            regions.save(&ctx.out()?.join("regions.json"))?;
        }
        Cmd::Edges { regions, split } => {
            let m = ctx.manifest()?;
            let regions = match (&regions, &ctx.common.model) {
                (None, None) => None,
                _ => Some(ctx.regions(&m, regions.as_deref())?),
            };
            let edges = ctx.subdir("edges")?;
            let enhanced = match regions {
                Some(_) => Some(ctx.subdir("enhanced")?),
                None => None,
            };
            records(&m, split).par_iter().try_for_each(|r| -> Result<()> {
                let img = load_record(&m, r, cfg.edges.source)?;
                save_edge_map(&img.edge, &edges.join(format!("{}.png", r.id)))?;
                if let (Some(reg), Some(dir)) = (&regions, &enhanced) {
                    let e = enhance_edges(&img.edge, reg)?;
                    save_edge_map(&e.to_edge_map(), &dir.join(format!("{}.png", r.id)))?;
                }
                Ok(())
            })?;
        }
        Cmd::Proposals { regions, split } => {
            let m = ctx.manifest()?;
            let regions = ctx.regions(&m, regions.as_deref())?;
            let per_image = records(&m, split)
                .par_iter()
                .map(|r| {
                    let img = load_record(&m, r, cfg.edges.source)?;
                    let ps = rank_proposals(&img, &regions, cfg)?;
                    Ok(ps.iter().enumerate().map(|(i, p)| ProposalRow::from_proposal(&r.id, i, p)).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            write_proposal_rows(&ctx.out()?.join("proposals.csv"), &per_image.concat())?;
        }
        Cmd::Features { regions, split } => {
            let m = ctx.manifest()?;
            let regions = ctx.regions(&m, regions.as_deref())?;
            let path = ctx.out()?.join("features.csv");
            let mut w = csv::Writer::from_writer(create(&path)?);
            let header = ["image_id", "rank"].into_iter().chain(FEATURE_NAMES);
            w.write_record(header).map_err(csv_err(&path))?;
            let per_image = records(&m, split)
                .par_iter()
                .map(|r| {
                    let img = load_record(&m, r, cfg.edges.source)?;
                    let (enhanced, ps) = propose(&img, &regions, cfg)?;
                    describe_all(&FeatureContext::new(&enhanced, &img.rgb)?, &ps)
                })
                .collect::<Result<Vec<_>>>()?;
            for (r, vs) in records(&m, split).iter().zip(&per_image) {
                for (rank, v) in vs.iter().enumerate() {
                    let row = [r.id.clone(), rank.to_string()].into_iter().chain(v.0.iter().map(f64::to_string));
                    w.write_record(row).map_err(csv_err(&path))?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Cmd::Train { regions } => {
            let m = ctx.manifest()?;
            let regions = match regions {
                Some(p) => MLRegionSet::load(&p)?,
                None => ctx.fit_regions(&m)?,
            };
            let out = ctx.out()?;
            regions.save(&out.join("regions.json"))?;
            let images = load_split(&m, Split::Train, cfg.edges.source)?;
            info!("training on {} images", images.len());
            let model = train(&images, regions, cfg)?;
            model.save(&out.join("model.json"))?;
        }
        Cmd::Infer { split } => {
            let m = ctx.manifest()?;
            let model = ctx.model()?;
            let fusion = cfg.fusion_params();
            let (maps, masks) = (ctx.subdir("maps")?, ctx.subdir("masks")?);
            let recs = records(&m, split);
            let rows = recs
                .par_iter()
                .map(|r| {
                    let img = load_record(&m, r, cfg.edges.source)?;
                    let pred = predict_image(&model, &img, cfg)?;
                    let (scored, map) = finish_image(&pred, &fusion)?;
                    map.save_png(&maps.join(format!("{}.png", r.id)))?;
                    let bin = threshold_mask(&map, cfg.eval.mask_threshold)?;
                    let mask_path = masks.join(format!("{}.png", r.id));
                    mask_image(map.width(), map.height(), &bin)?
                        .save(&mask_path)
                        .map_err(|e| Error::image(&mask_path, e))?;
                    Ok(scored
                        .iter()
                        .enumerate()
                        .map(|(i, s)| ProposalRow::from_scored(&r.id, i, s))
                        .collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            write_proposal_rows(&ctx.out()?.join("scores.csv"), &rows.concat())?;
        }
        Cmd::EvalRoc { maps, split } => {
            let m = ctx.manifest()?;
            let recs = records(&m, split);
            let loaded = recs
                .par_iter()
                .map(|r| {
                    let map = ProbabilityMap::load_png(&maps.join(format!("{}.png", r.id)))?;
                    let obstacle = r.obstacle_mask.as_ref().map(|p| m.resolve(p));
                    let masks = SceneMasks::load(&m.resolve(&r.label_mask), obstacle.as_deref())?;
                    Ok((map, masks))
                })
                .collect::<Result<Vec<_>>>()?;
            let (map_list, mask_list): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
            let roc = pixel_roc(&map_list, &mask_list)?;
            let out = ctx.out()?;
            let path = out.join("roc.csv");
            write_roc_csv(create(&path)?, &roc)?;
            let mut fprs = SUMMARY_FPRS.to_vec();
            if !fprs.contains(&cfg.eval.fpr) {
                fprs.push(cfg.eval.fpr);
                fprs.sort_by(f64::total_cmp);
            }
            let path = out.join("roc_summary.csv");
            let mut w = csv::Writer::from_writer(create(&path)?);
            w.write_record(["fpr", "tpr"]).map_err(csv_err(&path))?;
            for f in fprs {
                w.write_record([f.to_string(), tpr_at_fpr(&roc, f)?.to_string()]).map_err(csv_err(&path))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Cmd::EvalRecall { proposals, split } => {
            let m = ctx.manifest()?;
            let mut boxes = read_ranked_boxes(&proposals)?;
            let images: Vec<RankedImage> = records(&m, split)
                .iter()
                .map(|r| RankedImage { proposals: boxes.remove(&r.id).unwrap_or_default(), gt: r.obstacles.clone() })
                .collect();
            let out = ctx.out()?;
            let e = &cfg.eval;
            write_recall_csv(
                create(&out.join("recall_by_count.csv"))?,
                &recall_by_count(&images, e.recall_iou, &e.recall_counts)?,
            )?;
            let by_iou = recall_by_iou(&images, Some(e.top_n))?;
            write_recall_csv(create(&out.join("recall_by_iou.csv"))?, &by_iou)?;
            let path = out.join("ar.csv");
            let mut w = csv::Writer::from_writer(create(&path)?);
            w.write_record(["top_n", "ar"]).map_err(csv_err(&path))?;
            for &n in &e.recall_counts {
                let ar = recall_by_iou(&images, Some(n))?.iter().map(|p| p.recall).sum::<f64>()
                    / AR_IOU_PERCENT.len() as f64;
                w.write_record([n.to_string(), ar.to_string()]).map_err(csv_err(&path))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Cmd::Render { maps, proposals, top, split } => {
            if maps.is_none() && proposals.is_none() {
                return Err(Error::Config("render needs --maps, --proposals or both".into()));
            }
            let m = ctx.manifest()?;
            let boxes = proposals.as_deref().map(read_ranked_boxes).transpose()?;
            let dir = ctx.subdir("overlays")?;
            records(&m, split).par_iter().try_for_each(|r| -> Result<()> {
                let path = m.resolve(&r.image);
                let mut img = image::open(&path).map_err(|e| Error::image(&path, e))?.to_rgb8();
                if let Some(d) = &maps {
                    img = render_heat(&img, &ProbabilityMap::load_png(&d.join(format!("{}.png", r.id)))?)?;
                }
                if let Some(b) = boxes.as_ref().and_then(|b| b.get(&r.id)) {
                    img = render_boxes(&img, &b[..top.min(b.len())], BOX_COLOR)?;
                }
                let p = dir.join(format!("{}.png", r.id));
                img.save(&p).map_err(|e| Error::image(&p, e))
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tinyobs: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
