use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args as ClapArgs;
use gridmend_core::baselines::{fit_global_mean, MeanTable, RbfConfig};
use gridmend_core::eval::{
    scenario_run, Imputer, MeanImputer, ModelImputer, NearestImputer, RbfImputer, ScenarioSpec,
};
use gridmend_core::io::{kv, ugb};
use gridmend_core::nn::UNetModel;
use gridmend_core::{Error, Result};

use crate::manifest::Manifest;

#[derive(ClapArgs)]
pub struct Args {
    /// Trained checkpoint; exclusive with --baseline
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// mean | nn2 | nn3 | rbf2 | rbf3
    #[arg(long)]
    pub baseline: Option<String>,
    /// Test series (UGB + .meta)
    #[arg(long)]
    pub series: PathBuf,
    /// Scenario spec (key=value: name, mask, start_frame, end_frame)
    #[arg(long)]
    pub scenario: PathBuf,
    /// Block depth; defaults to the checkpoint's T (required for baselines)
    #[arg(long)]
    pub t: Option<usize>,
    /// Training series for the temporal-mean baseline
    #[arg(long)]
    pub train_series: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub rbf_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub rbf_seed: u64,
    #[arg(short, long)]
    pub out: PathBuf,
}

fn load_scenario_spec(path: &Path) -> Result<(ScenarioSpec, PathBuf)> {
    let pairs = kv::read_kv(path)?;
    let name: String = kv::required(&pairs, "name")?;
    let mask_path = PathBuf::from(kv::required::<String>(&pairs, "mask")?);
    let mask = ugb::read_mask_block(&mask_path)?;
    let start_frame: usize = kv::required(&pairs, "start_frame")?;
    let end_frame: usize = kv::required(&pairs, "end_frame")?;
    Ok((ScenarioSpec { name, mask, start_frame, end_frame }, mask_path))
}

pub fn run(args: &Args, argv: &[String], started: Instant) -> Result<()> {
    let series = ugb::read_series(&args.series)?;
    let (spec, mask_path) = load_scenario_spec(&args.scenario)?;

    let model: Option<UNetModel<f32>> = match &args.ckpt {
        Some(p) => Some(UNetModel::load(p)?),
        None => None,
    };
    let mean_table: Option<MeanTable> = match (&args.baseline, &args.train_series) {
        (Some(b), Some(ts)) if b == "mean" => Some(fit_global_mean(&ugb::read_series(ts)?)?),
        (Some(b), None) if b == "mean" => {
            return Err(Error::Param("baseline mean needs --train-series".into()))
        }
        _ => None,
    };
    let nearest2 = NearestImputer { dims: 2 };
    let nearest3 = NearestImputer { dims: 3 };
    let rbf2 = RbfImputer {
        dims: 2,
        cfg: RbfConfig { sample_count: args.rbf_samples, seed: args.rbf_seed },
    };
    let rbf3 = RbfImputer {
        dims: 3,
        cfg: RbfConfig { sample_count: args.rbf_samples, seed: args.rbf_seed },
    };
    let model_imputer = model.as_ref().map(|m| ModelImputer { model: m, label: "model".into() });
    let mean_imputer = mean_table.as_ref().map(|t| MeanImputer { table: t });

    let (imputer, t): (&dyn Imputer, usize) = match (&model_imputer, &args.baseline) {
        (Some(mi), None) => {
            let t = args.t.unwrap_or_else(|| mi.model.temporal_dim());
            (mi, t)
        }
        (None, Some(name)) => {
            let t = args
                .t
                .ok_or_else(|| Error::Param("--t is required with --baseline".into()))?;
            let imp: &dyn Imputer = match name.as_str() {
                "mean" => mean_imputer.as_ref().unwrap(),
                "nn2" => &nearest2,
                "nn3" => &nearest3,
                "rbf2" => &rbf2,
                "rbf3" => &rbf3,
                other => return Err(Error::Param(format!("unknown baseline '{other}'"))),
            };
            (imp, t)
        }
        _ => {
            return Err(Error::Param(
                "exactly one of --ckpt or --baseline must be given".into(),
            ))
        }
    };
    let result = scenario_run(imputer, &series, &spec, t)?;
    result.write_csv(std::fs::File::create(&args.out)?)?;
    println!(
        "scenario '{}' with {}: {} hours, avg |pred_mean - gt_mean| = {:.4}",
        spec.name,
        imputer.name(),
        result.points.len(),
        result.avg_abs_err
    );
    let mut m = Manifest::new("scenario", argv, started);
    m.seed(args.rbf_seed);
    m.input(&args.series).input(&args.scenario).input(&mask_path);
    if let Some(p) = &args.ckpt {
        m.input(p);
    }
    if let Some(p) = &args.train_series {
        m.input(p);
    }
    m.output(&args.out).write()
}
