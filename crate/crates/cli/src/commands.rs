use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fragavg::averaging::{
    average_candidates, fit_candidates, fit_for_pattern, observed_columns, predict as predict_row, Prediction,
};
use fragavg::baselines::{parse_methods, MethodSettings};
use fragavg::compare::{compare as run_compare, split_rows};
use fragavg::io::{
    format_num, read_csv_path, read_groups, read_query, write_csv, write_groups, ColumnGroup, CsvOptions,
};
use fragavg::sim::{run_study_with, BetaCase, SimConfig};
use fragavg::{
    AveragedModel, AveragingSettings, ExponentialFamily, FitOptions, FragmentaryDataset, LambdaChoice, PatternIndex,
};

use crate::args::{
    Command, CompareArgs, FitArgs, GlobalArgs, ModelArgs, PredictArgs, RunConfig, ScreenArgs, SimulateArgs,
};
use crate::report;
use crate::{CliResult, Failure};

/// Turns every input path into an absolute one so the config replays from any directory.
pub fn absolutize(config: &mut RunConfig) -> CliResult<()> {
    fn abs(p: &mut PathBuf) -> CliResult<()> {
        *p = std::path::absolute(&*p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
        Ok(())
    }
    fn existing(p: &mut PathBuf) -> CliResult<()> {
        if !p.is_file() {
            return Err(Failure::input(format!("{}: no such file", p.display())));
        }
        abs(p)
    }
    abs(&mut config.global.out)?;
    match &mut config.command {
        Command::Fit(a) => existing(&mut a.input)?,
        Command::Predict(a) => {
            existing(&mut a.model)?;
            existing(&mut a.query)?;
            if let Some(t) = &mut a.train {
                existing(t)?;
            }
        }
        Command::Compare(a) => {
            existing(&mut a.input)?;
            if let Some(t) = &mut a.test {
                existing(t)?;
            }
            if let Some(g) = &mut a.groups {
                existing(g)?;
            }
        }
        Command::Screen(a) => {
            existing(&mut a.input)?;
            existing(&mut a.groups)?;
        }
        Command::Simulate(_) | Command::Rerun(_) => {}
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn family(global: &GlobalArgs) -> CliResult<ExponentialFamily> {
    Ok(global.family.parse()?)
}

/// Everything needed to read training data and refit the model later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub csv: CsvOptions,
    pub lambda: LambdaChoice,
    pub settings: AveragingSettings,
}

/// The file written by `fit` and read by `predict`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub fit: FitRecord,
    pub model: AveragedModel,
}

fn csv_options(global: &GlobalArgs, m: &ModelArgs) -> CsvOptions {
    CsvOptions {
        response: m.response.clone(),
        na_marker: global.na_marker.clone(),
        intercept: !m.no_intercept,
    }
}

fn averaging_settings(m: &ModelArgs) -> AveragingSettings {
    AveragingSettings {
        fit: FitOptions {
            max_iter: m.max_iter,
            grad_tol: m.grad_tol,
            ridge: m.ridge,
            ..FitOptions::default()
        },
        order: m.pattern_order.into(),
        ..AveragingSettings::default()
    }
}

fn read_data(path: &Path, opts: &CsvOptions) -> CliResult<FragmentaryDataset> {
    read_csv_path(path, opts).map_err(|e| {
        let f = Failure::from(e);
        Failure {
            message: format!("{}: {}", path.display(), f.message),
            ..f
        }
    })
}

pub fn fit(global: &GlobalArgs, a: &FitArgs) -> CliResult<()> {
    let family = family(global)?;
    let record = FitRecord {
        csv: csv_options(global, &a.model),
        lambda: a.lambda.parse()?,
        settings: averaging_settings(&a.model),
    };
    let data = read_data(&a.input, &record.csv)?;
    family.validate_response(data.y())?;
    let index = PatternIndex::build(&data, record.settings.order)?;

    // the pattern report goes out first so it survives a failed fit
    let patterns = report::patterns_text(&data, &index);
    fs::write(global.out.join("report.txt"), &patterns)?;
    write_json(&global.out.join("patterns.json"), &report::pattern_rows(&data, &index))?;

    let candidates = fit_candidates(&data, &index, &family, &record.settings.fit)?;
    let model = average_candidates(&data, &index, candidates, &family, record.lambda, &record.settings.opt)?;
    fs::write(
        global.out.join("report.txt"),
        format!("{patterns}\n{}", report::model_text(&model)),
    )?;
    write_json(&global.out.join("model.json"), &ModelFile { fit: record, model })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rule {
    Full,
    Restricted,
    Unavailable,
    Failed,
}

impl Rule {
    fn name(self) -> &'static str {
        match self {
            Rule::Full => "full",
            Rule::Restricted => "restricted",
            Rule::Unavailable => "unavailable",
            Rule::Failed => "failed",
        }
    }
}

fn num_or_na(v: Option<f64>) -> String {
    v.map(format_num).unwrap_or_else(|| "NA".into())
}

pub fn predict(global: &GlobalArgs, a: &PredictArgs) -> CliResult<()> {
    let file: ModelFile = serde_json::from_reader(
        File::open(&a.model).map_err(|e| Failure::input(format!("{}: {e}", a.model.display())))?,
    )
    .map_err(|e| Failure::input(format!("{}: {e}", a.model.display())))?;
    let model = &file.model;
    let rows = read_query(
        File::open(&a.query).map_err(|e| Failure::input(format!("{}: {e}", a.query.display())))?,
        &model.column_names,
        &global.na_marker,
    )?;
    let train = match &a.train {
        Some(path) => {
            let mut csv = file.fit.csv.clone();
            csv.na_marker = global.na_marker.clone();
            let data = read_data(path, &csv)?;
            if data.column_names() != model.column_names.as_slice() {
                return Err(Failure::input("training CSV columns differ from the model's"));
            }
            Some(data)
        }
        None => None,
    };

    // one refit per distinct availability pattern
    let mut refits: BTreeMap<Vec<usize>, Option<AveragedModel>> = BTreeMap::new();
    let mut out = csv::Writer::from_writer(create(&global.out.join("predictions.csv"))?);
    out.write_record(["row", "rule", "pattern", "theta", "mean"])?;
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for (i, x) in rows.iter().enumerate() {
        let cols = observed_columns(x);
        let (rule, pred): (Rule, Option<Prediction>) = if model.covers(x) {
            (Rule::Full, Some(predict_row(model, x)?))
        } else if let Some(data) = &train {
            let refit = refits.entry(cols.clone()).or_insert_with(|| {
                fit_for_pattern(data, &model.family, file.fit.lambda, &file.fit.settings, &cols)
                    .map_err(|e| log::warn!("refit for pattern {cols:?} failed: {e}"))
                    .ok()
            });
            match refit {
                Some(m) => {
                    let xr: Vec<Option<f64>> = cols.iter().map(|&j| x[j]).collect();
                    (Rule::Restricted, Some(predict_row(m, &xr)?))
                }
                None => (Rule::Failed, None),
            }
        } else {
            (Rule::Unavailable, None)
        };
        *counts.entry(rule.name()).or_default() += 1;
        let pattern: Vec<&str> = cols.iter().map(|&j| model.column_names[j].as_str()).collect();
        out.write_record([
            i.to_string(),
            rule.name().to_string(),
            pattern.join("|"),
            num_or_na(pred.map(|p| p.theta)),
            num_or_na(pred.map(|p| p.mean)),
        ])?;
    }
    out.flush()?;
    if let Some(n) = counts.get("unavailable") {
        log::warn!("{n} rows miss a model covariate; pass --train to refit for their patterns");
    }
    write_json(&global.out.join("predict_summary.json"), &counts)
}

fn load_groups(path: Option<&Path>) -> CliResult<Vec<ColumnGroup>> {
    path.map(|p| read_groups(p).map_err(Failure::from))
        .transpose()
        .map(Option::unwrap_or_default)
}

pub fn compare(global: &GlobalArgs, a: &CompareArgs) -> CliResult<()> {
    let family = family(global)?;
    let methods = parse_methods(&a.methods)?;
    let csv = csv_options(global, &a.model);
    let data = read_data(&a.input, &csv)?;
    family.validate_response(data.y())?;
    let (train, test) = match &a.test {
        Some(path) => (data, read_data(path, &csv)?),
        None => {
            let (tr, te) = split_rows(&data, a.split, a.stratify_pattern, global.seed)?;
            write_json(
                &global.out.join("split.json"),
                &serde_json::json!({ "train": tr, "test": te }),
            )?;
            (data.select_rows(&tr)?, data.select_rows(&te)?)
        }
    };
    let groups = load_groups(a.groups.as_deref())?;
    let mut settings = MethodSettings {
        averaging: averaging_settings(&a.model),
        ic_sample: a.ic_sample.into(),
        ..MethodSettings::default()
    };
    settings.glasso.seed = global.seed;
    let result = run_compare(&train, &test, &family, &methods, &groups, &settings)?;

    for &m in &methods {
        let path = global.out.join(format!("predictions_{m}.csv"));
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["row", "pattern", "restricted", "theta", "mean", "y"])?;
        for p in result.predictions.iter().filter(|p| p.method == m) {
            w.write_record([
                p.row.to_string(),
                p.pattern.clone(),
                p.restricted.to_string(),
                num_or_na(p.theta),
                num_or_na(p.mean),
                format_num(p.y),
            ])?;
        }
        w.flush()?;
    }
    let mut w = csv::Writer::from_writer(create(&global.out.join("summary.csv"))?);
    w.write_record(["method", "predicted", "failed", "kl_total", "kl_per_obs"])?;
    for s in &result.summary {
        w.write_record([
            s.method.to_string(),
            s.predicted.to_string(),
            s.failed.to_string(),
            format_num(s.kl_total),
            format_num(s.kl_per_obs),
        ])?;
    }
    w.flush()?;
    let fits: Vec<_> = result.fits.iter().filter_map(|(_, f)| f.as_ref()).collect();
    write_json(&global.out.join("fits.json"), &fits)
}

pub fn simulate(global: &GlobalArgs, a: &SimulateArgs) -> CliResult<()> {
    let family = family(global)?;
    if family != ExponentialFamily::binomial() {
        return Err(Failure::input(
            "the simulation design is logistic; use --family binomial",
        ));
    }
    let case: BetaCase = a.beta_case.parse()?;
    let mut cfg = SimConfig::new(a.n, a.rho, case, a.reps, global.seed);
    cfg.methods = parse_methods(&a.methods)?;
    cfg.validate()?;
    let mut settings = MethodSettings {
        ic_sample: a.ic_sample.into(),
        ..MethodSettings::default()
    };
    settings.glasso.seed = global.seed;
    let result = run_study_with(&cfg, &settings)?;
    result.write_kl_csv(create(&global.out.join("kl_per_rep.csv"))?)?;
    result.write_summary_csv(create(&global.out.join("summary.csv"))?)?;
    for s in &result.summary {
        if s.failed > 0 {
            log::warn!("{}: {} of {} replications failed", s.method, s.failed, s.ok + s.failed);
        }
    }
    Ok(())
}

pub fn screen(global: &GlobalArgs, a: &ScreenArgs) -> CliResult<()> {
    let csv = CsvOptions {
        response: a.response.clone(),
        na_marker: global.na_marker.clone(),
        intercept: false,
    };
    let data = read_data(&a.input, &csv)?;
    let groups = read_groups(&a.groups)?;
    let (reduced, screened) = fragavg::screen::screen(&data, &groups, a.keep)?;
    write_csv(
        &reduced,
        create(&global.out.join("screened.csv"))?,
        &a.response,
        &global.na_marker,
    )?;
    let kept: Vec<ColumnGroup> = screened
        .iter()
        .map(|g| ColumnGroup {
            name: g.group.clone(),
            columns: g.columns.iter().filter(|c| c.kept).map(|c| c.column.clone()).collect(),
        })
        .collect();
    write_groups(global.out.join("groups.json"), &kept)?;
    write_json(&global.out.join("screen.json"), &screened)
}
