use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use cpfactor::covariates::CovariateSpec;
use cpfactor::evalsuite::{self, ReplicationRecord, Truth};
use cpfactor::events::{parse_event_log, validate_dataset, write_event_log, Dataset, EventCatalog};
use cpfactor::inference::{self, InferenceConfig, InferenceError};
use cpfactor::lik::QuadratureConfig;
use cpfactor::model::{BetaConstraint, ConstraintMask, Coord, LoadingConstraint, PenaltyConfig};
use cpfactor::select::{grid_search, GridSpec, SelectConfig, SupportMask};
use cpfactor::simulator::{self, SimConfig, TrueModel};
use cpfactor::stem::{fit_prepared, FitConfig, FitData};
use cpfactor::Params;
use serde_json::json;

use crate::error::CliError;
use crate::manifest::{self, Recorder};
use crate::{EmArgs, ModelFiles};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::from(e).at(dir))
}

fn load_model(rec: &mut Recorder, files: &ModelFiles) -> Result<(EventCatalog, CovariateSpec), CliError> {
    let catalog = EventCatalog::parse(&rec.read(&files.catalog)?).map_err(|e| CliError::from(e).at(&files.catalog))?;
    let spec = CovariateSpec::parse(&rec.read(&files.spec)?, &catalog).map_err(|e| CliError::from(e).at(&files.spec))?;
    spec.validate(&catalog).map_err(|e| CliError::from(e).at(&files.spec))?;
    Ok((catalog, spec))
}

fn load_mask(rec: &mut Recorder, path: &Path, catalog: &EventCatalog) -> Result<ConstraintMask, CliError> {
    ConstraintMask::parse(&rec.read(path)?, catalog).map_err(|e| CliError::from(e).at(path))
}

fn load_params(rec: &mut Recorder, path: &Path, catalog: &EventCatalog) -> Result<Params, CliError> {
    Params::parse(&rec.read(path)?, catalog).map_err(|e| CliError::from(e).at(path))
}

fn load_data(rec: &mut Recorder, dir: &Path, catalog: &EventCatalog) -> Result<Dataset, CliError> {
    let path = dir.join("events.log");
    let data = parse_event_log(&rec.read(&path)?, catalog).map_err(|e| CliError::from(e).at(&path))?;
    if let Some(v) = validate_dataset(&data).first() {
        return Err(CliError::validation(format!("subject {}: {:?}", v.subject, v.rule)).at(&path));
    }
    Ok(data)
}

fn fit_config(em: &EmArgs, seed: u64) -> FitConfig {
    FitConfig {
        total_iters: em.iters,
        burn_in: em.burn_in,
        avg_window: em.window,
        zero_snap: em.zero_snap,
        seed,
        ..FitConfig::default()
    }
}

fn check_dims(params: &Params, spec: &CovariateSpec, mask: &ConstraintMask) -> Result<(), CliError> {
    let dims = cpfactor::Dims::from_spec(spec, mask.factors());
    params.validate(&dims)?;
    mask.validate(&dims)?;
    Ok(())
}

pub fn design(out: &Path, gate_terminal: bool) -> Result<(), CliError> {
    ensure_dir(out)?;
    let mut d = simulator::builtin_design();
    if gate_terminal {
        d = d.with_terminal_gate();
    }
    let mut rec = Recorder::new("design", json!({ "gate_terminal": gate_terminal }), None);
    rec.write(&out.join("catalog.txt"), &d.catalog.to_text())?;
    rec.write(&out.join("spec.txt"), &d.spec.to_text(&d.catalog))?;
    rec.write(&out.join("mask.txt"), &d.mask.to_text(&d.catalog))?;
    rec.write(&out.join("truth.params"), &d.truth.to_text(&d.catalog))?;
    rec.finish(out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    files: &ModelFiles,
    truth: &Path,
    n: usize,
    seed: u64,
    censor_rate: Option<f64>,
    max_events: usize,
    horizon: f64,
    out: &Path,
) -> Result<(), CliError> {
    let config = json!({ "model": files, "truth": truth, "n": n, "censor_rate": censor_rate,
        "max_events": max_events, "horizon": horizon });
    let mut rec = Recorder::new("simulate", config, Some(seed));
    let sim_cfg = SimConfig { max_events, horizon, ..SimConfig::new(n, seed) };
    sim_cfg.validate()?;
    let (catalog, spec) = load_model(&mut rec, files)?;
    let params = load_params(&mut rec, truth, &catalog)?;
    let model = TrueModel { params, spec, catalog, censor_rate };
    model.validate()?;
    let sim = simulator::simulate_dataset(&model, &sim_cfg)?;
    ensure_dir(out)?;
    rec.write(&out.join("events.log"), &write_event_log(&sim.dataset))?;
    rec.write(&out.join("thetas.csv"), &simulator::thetas_to_text(&sim))?;
    rec.write(&out.join("truth.params"), &model.params.to_text(&model.catalog))?;
    rec.finish(out)?;
    Ok(())
}

/// Nonzero penalized coordinates, one name per line.
fn support_names(support: &SupportMask, mask: &ConstraintMask, catalog: &EventCatalog, spec: &CovariateSpec) -> String {
    let mut out = String::new();
    for (j, row) in support.beta.iter().enumerate() {
        for (l, &on) in row.iter().enumerate() {
            if on && mask.beta[j][l] == BetaConstraint::FreePenalized {
                out.push_str(&Coord::Beta(j, l).name(catalog, spec));
                out.push('\n');
            }
        }
    }
    let k = mask.factors();
    for kk in 0..k {
        for (j, rows) in support.loadings.iter().enumerate() {
            for (l, row) in rows.iter().enumerate() {
                if row[kk] && mask.loadings[j][l][kk] == LoadingConstraint::FreePenalized {
                    out.push_str(&Coord::Loading(j, l, kk).name(catalog, spec));
                    out.push('\n');
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn fit(
    files: &ModelFiles,
    mask_path: &Path,
    data_dir: &Path,
    gamma1: f64,
    gamma2: f64,
    seed: u64,
    em: &EmArgs,
    out: &Path,
) -> Result<(), CliError> {
    let config = json!({ "model": files, "mask": mask_path, "data": data_dir, "gamma1": gamma1, "gamma2": gamma2, "em": em });
    let mut rec = Recorder::new("fit", config, Some(seed));
    let cfg = fit_config(em, seed);
    cfg.validate()?;
    let penalty = PenaltyConfig::new(gamma1, gamma2);
    penalty.validate().map_err(|e| CliError::config(e.to_string()))?;
    let (catalog, spec) = load_model(&mut rec, files)?;
    let mask = load_mask(&mut rec, mask_path, &catalog)?;
    let data = load_data(&mut rec, data_dir, &catalog)?;
    let prepared = FitData::new(&data, &spec, mask.factors())?;
    let result = fit_prepared(&prepared, &mask, &penalty, &cfg, None)?;
    ensure_dir(out)?;
    rec.write(&out.join("params.txt"), &result.params_avg.to_text(&catalog))?;
    let mut trace = String::from("iteration,objective\n");
    for (t, v) in result.objective_trace.iter().enumerate() {
        trace.push_str(&format!("{},{v}\n", t + 1));
    }
    rec.write(&out.join("trace.csv"), &trace)?;
    rec.write(&out.join("support.txt"), &support_names(&result.support, &mask, &catalog, &spec))?;
    rec.write(
        &out.join("diagnostics.txt"),
        &format!(
            "acceptance_mean,{}\nacceptance_min,{}\nacceptance_max,{}\nskipped_updates,{}\nstationary,{}\n",
            result.acceptance_mean,
            result.acceptance_min,
            result.acceptance_max,
            result.skipped_updates,
            result.is_stationary(em.window)
        ),
    )?;
    rec.finish(out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn select(
    files: &ModelFiles,
    mask_path: &Path,
    data_dir: &Path,
    grid: GridSpec,
    seed: u64,
    em: &EmArgs,
    nodes: usize,
    warm_start: bool,
    out: &Path,
) -> Result<(), CliError> {
    let config = json!({ "model": files, "mask": mask_path, "data": data_dir,
        "log_gamma1": grid.log_gamma1, "count1": grid.count1, "log_gamma2": grid.log_gamma2, "count2": grid.count2,
        "em": em, "nodes": nodes, "warm_start": warm_start });
    let mut rec = Recorder::new("select", config, Some(seed));
    grid.validate().map_err(|e| CliError::config(e.to_string()))?;
    let fc = fit_config(em, seed);
    fc.validate()?;
    let quad = QuadratureConfig { nodes_per_dim: nodes, ..QuadratureConfig::default() };
    quad.validate()?;
    let (catalog, spec) = load_model(&mut rec, files)?;
    let mask = load_mask(&mut rec, mask_path, &catalog)?;
    let data = load_data(&mut rec, data_dir, &catalog)?;
    let prepared = FitData::new(&data, &spec, mask.factors())?;
    let cfg = SelectConfig { fit: fc.clone(), refit: fc, quad, seed, warm_start };
    let result = grid_search(&prepared, &mask, &grid, &cfg)?;
    ensure_dir(out)?;
    rec.write(&out.join("bic.csv"), &result.to_table())?;
    let mut supports = String::from("gamma1,gamma2,support\n");
    for r in &result.rows {
        let bits = r.support.as_ref().map(SupportMask::to_bits).unwrap_or_default();
        supports.push_str(&format!("{},{},{bits}\n", r.gamma1, r.gamma2));
    }
    rec.write(&out.join("supports.csv"), &supports)?;
    let best = result.best_row().and_then(|r| r.refit.as_ref());
    match best {
        Some(p) => rec.write(&out.join("selected.params"), &p.to_text(&catalog))?,
        None => {
            rec.finish(out)?;
            return Err(CliError::numerical("no grid point produced a finite BIC"));
        }
    }
    rec.finish(out)?;
    Ok(())
}

pub fn se(
    files: &ModelFiles,
    mask_path: &Path,
    data_dir: &Path,
    params_path: &Path,
    cfg: &InferenceConfig,
    all_free: bool,
    out: &Path,
) -> Result<(), CliError> {
    let config = json!({ "model": files, "mask": mask_path, "data": data_dir, "params": params_path,
        "draws": cfg.draws, "thin": cfg.thin, "warmup": cfg.warmup, "all_free": all_free });
    let mut rec = Recorder::new("se", config, Some(cfg.seed));
    cfg.validate()?;
    let (catalog, spec) = load_model(&mut rec, files)?;
    let mask = load_mask(&mut rec, mask_path, &catalog)?;
    let params = load_params(&mut rec, params_path, &catalog)?;
    check_dims(&params, &spec, &mask)?;
    let data = load_data(&mut rec, data_dir, &catalog)?;
    let prepared = FitData::new(&data, &spec, mask.factors())?;
    let coords = inference::free_coordinates(&params, &mask, !all_free);
    let info = inference::observed_info(&params, &prepared, &coords, cfg)?;
    let ses = inference::standard_errors(&info);
    ensure_dir(out)?;
    let table = inference::se_table(&params, &coords, ses.as_ref().ok().map(Vec::as_slice), &catalog, &spec);
    rec.write(&out.join("se.csv"), &table)?;
    rec.finish(out)?;
    match ses {
        Ok(_) => Ok(()),
        Err(e @ InferenceError::SingularInfo(_)) => Err(e.into()),
        Err(e) => Err(e.into()),
    }
}

fn read_record(
    rec: &mut Recorder,
    dir: &Path,
    index: usize,
    catalog: &EventCatalog,
    mask: &ConstraintMask,
    names: &HashMap<String, Coord>,
) -> Result<ReplicationRecord, CliError> {
    let dims = mask.dims();
    let selected = load_params(rec, &dir.join("selected.params"), catalog)?;
    let supports_path = dir.join("supports.csv");
    let mut grid_supports = Vec::new();
    for line in rec.read(&supports_path)?.lines().skip(1) {
        let bits = line.rsplit(',').next().unwrap_or_default();
        if bits.is_empty() {
            continue;
        }
        grid_supports.push(
            SupportMask::from_bits(bits, &dims)
                .ok_or_else(|| CliError::validation("support does not match the mask").at(&supports_path))?,
        );
    }
    let se_path = dir.join("se.csv");
    let mut estimates = BTreeMap::new();
    if se_path.exists() {
        for line in rec.read(&se_path)?.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(CliError::validation("expected `coordinate,estimate,se`").at(&se_path));
            }
            let c = names
                .get(f[0])
                .ok_or_else(|| CliError::validation(format!("unknown coordinate `{}`", f[0])).at(&se_path))?;
            let est: f64 = f[1].parse().map_err(|_| CliError::validation("bad estimate").at(&se_path))?;
            let se = f[2].parse::<f64>().ok();
            estimates.insert(*c, (est, se));
        }
    }
    for m in ["manifest.select.json", "manifest.se.json"] {
        let p = dir.join(m);
        if p.exists() {
            manifest::load(&p)?;
            rec.read(&p)?;
        }
    }
    Ok(ReplicationRecord { replicate: index, grid_supports, selected: SupportMask::of(&selected, mask), estimates })
}

pub fn eval(
    files: &ModelFiles,
    mask_path: &Path,
    truth_path: &Path,
    dirs: &[std::path::PathBuf],
    out: &Path,
) -> Result<(), CliError> {
    let config = json!({ "model": files, "mask": mask_path, "truth": truth_path, "replications": dirs });
    let mut rec = Recorder::new("eval", config, None);
    let (catalog, spec) = load_model(&mut rec, files)?;
    let mask = load_mask(&mut rec, mask_path, &catalog)?;
    let params = load_params(&mut rec, truth_path, &catalog)?;
    check_dims(&params, &spec, &mask)?;
    let names: HashMap<String, Coord> = Coord::all(&params.dims(), true)
        .into_iter()
        .map(|c| (c.name(&catalog, &spec).replace(',', ";"), c))
        .collect();
    let records = dirs
        .iter()
        .enumerate()
        .map(|(i, d)| read_record(&mut rec, d, i, &catalog, &mask, &names))
        .collect::<Result<Vec<_>, _>>()?;
    let truth = Truth { params, mask };
    let sel = evalsuite::selection_metrics(&records, &truth)?;
    let est = evalsuite::estimation_metrics(&records, &truth)?;
    ensure_dir(out)?;
    rec.write(&out.join("selection.csv"), &evalsuite::selection_report(&[(format!("n{}", records.len()), sel)]))?;
    rec.write(&out.join("estimation.csv"), &evalsuite::estimation_report(&est, &catalog, &spec))?;
    rec.finish(out)?;
    Ok(())
}
