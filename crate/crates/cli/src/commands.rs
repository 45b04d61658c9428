use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::{info, warn};

use dosetwin_core::grid::{load_grid, load_patient, save_grid, save_patient, PatientRecord, CT_FILE, DOSE_FILE};
use dosetwin_core::phantom::generate_cohort;
use dosetwin_core::surrogate::{
    featurize, predict as forward, train as fit, training_samples, DropoutMask, ParamVector,
};
use dosetwin_core::twin::{
    fit_surrogate, member_seeds, run_scenario, write_fraction_logs_csv, write_fraction_logs_json, write_timing_csv,
    CohortReport, CohortRow,
};
use dosetwin_core::uq::{default_dvh_specs, dose_score, dvh_score, ensemble_stats, write_dvh_bands, DoseEnsemble};
use dosetwin_core::Error;

use crate::config::{invalid, EngineConfig};
use crate::{PhantomArgs, PredictArgs, ScoreArgs, SimulateArgs, TrainArgs};

fn required(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| invalid(format!("--{name} is required (or set it in the [io] section)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// `dir` itself when it holds a CT, otherwise its patient subdirectories.
fn patient_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()).into());
    }
    if dir.join(CT_FILE).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CT_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        anyhow::bail!("no patient directories under {}", dir.display());
    }
    Ok(dirs)
}

fn load_patients(cfg: &EngineConfig, dir: &Path) -> Result<Vec<PatientRecord<f64>>> {
    let opts = cfg.load_options();
    patient_dirs(dir)?
        .iter()
        .map(|d| load_patient(d, cfg.grid_shape(), &opts).with_context(|| format!("loading {}", d.display())))
        .collect()
}

pub fn phantom(cfg: &EngineConfig, args: PhantomArgs) -> Result<()> {
    let out = required(args.out, &cfg.io.cohort_dir, "out")?;
    let count = args.count.unwrap_or(cfg.phantom.cohort_size);
    if count == 0 {
        return Err(invalid("--count must be >= 1"));
    }
    let cohort = generate_cohort(&cfg.phantom_spec(), count, cfg.phantom.jitter_mm, cfg.seed)?;
    for record in &cohort {
        save_patient(record, &out.join(&record.id))?;
    }
    info!("wrote {} phantoms to {}", cohort.len(), out.display());
    Ok(())
}

pub fn train(cfg: &EngineConfig, args: TrainArgs) -> Result<()> {
    let cohort_dir = required(args.cohort, &cfg.io.cohort_dir, "cohort")?;
    let out = required(args.out, &cfg.io.params, "out")?;
    let cohort = load_patients(cfg, &cohort_dir)?;
    let phantom = cfg.phantom_spec();
    let samples = training_samples(&cohort, &cfg.features(&phantom))?;
    let pairs: Vec<_> = samples.iter().map(|s| (&s.features, &s.mask)).collect();
    let fit_cfg = cfg.surrogate_fit();
    let init = ParamVector::initialize(&pairs, fit_cfg.dropout, fit_cfg.init_scale, cfg.seed)?;
    let outcome = fit(&init, &samples, &fit_cfg.training, fit_cfg.freeze_encoder)?;

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    outcome.params.save(&out)?;
    let losses_path = args.losses.unwrap_or_else(|| out.with_file_name("losses.csv"));
    let mut text = String::from("iteration,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    fs::write(&losses_path, text).with_context(|| format!("writing {}", losses_path.display()))?;

    let first = outcome.losses[0];
    let last = *outcome.losses.last().unwrap();
    println!(
        "trained on {} patients: loss {first:.6} -> {last:.3e} Gy over {} iterations",
        cohort.len(),
        outcome.losses.len() - 1
    );
    Ok(())
}

pub fn predict(cfg: &EngineConfig, args: PredictArgs) -> Result<()> {
    let params_path = required(args.params, &cfg.io.params, "params")?;
    let patients_dir = required(args.patients, &cfg.io.patients, "patients")?;
    let out = required(args.out, &cfg.io.out, "out")?;
    let params = ParamVector::<f64>::load(&params_path)?;
    let features_cfg = cfg.features(&cfg.phantom_spec());

    let seeds = match (args.stochastic, args.seeds) {
        (None, None) => None,
        (Some(0), _) => return Err(invalid("--stochastic K must be >= 1")),
        (k, Some(seeds)) => {
            if k.is_some_and(|k| k != seeds.len()) {
                return Err(invalid(format!(
                    "--stochastic {} with {} seeds",
                    k.unwrap(),
                    seeds.len()
                )));
            }
            if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
                return Err(invalid(
                    "dropout seeds must be distinct; duplicates give identical members",
                ));
            }
            Some(seeds)
        }
        (Some(k), None) => Some(member_seeds(cfg.seed, k)),
    };

    for record in load_patients(cfg, &patients_dir)? {
        let features = featurize(&record, &features_cfg)?;
        let dir = out.join(&record.id);
        create_dir(&dir)?;
        save_grid(&dir.join(DOSE_FILE), &forward(&params, &features, None)?)?;
        let Some(seeds) = &seeds else { continue };
        let members = seeds
            .iter()
            .map(|&s| {
                forward(
                    &params,
                    &features,
                    Some(&DropoutMask::new(s, params.dropout(), params.n_features())),
                )
            })
            .collect::<dosetwin_core::Result<Vec<_>>>()?;
        let mut listing = String::from("member,seed\n");
        for (i, s) in seeds.iter().enumerate() {
            listing.push_str(&format!("{i},{s}\n"));
        }
        fs::write(dir.join("seeds.txt"), listing)?;
        if members.len() == 1 {
            save_grid(&dir.join("mean.csv"), &members[0])?;
            continue;
        }
        let stats = ensemble_stats(&DoseEnsemble::new(members, seeds.clone())?)?;
        save_grid(&dir.join("mean.csv"), &stats.mean)?;
        save_grid(&dir.join("variance.csv"), &stats.variance)?;
        save_grid(&dir.join("sigma.csv"), &stats.std)?;
    }
    info!("predictions written to {}", out.display());
    Ok(())
}

pub fn score(cfg: &EngineConfig, args: ScoreArgs) -> Result<()> {
    let pred = required(args.pred, &cfg.io.pred_dir, "pred")?;
    let reference = required(args.reference, &cfg.io.ref_dir, "reference")?;
    let out = args
        .out
        .or_else(|| cfg.io.out.clone())
        .unwrap_or_else(|| PathBuf::from("scores.csv"));
    let single = reference.join(CT_FILE).exists();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for record in load_patients(cfg, &reference)? {
        let Some(ref_dose) = &record.reference_dose else {
            warn!("patient `{}` has no reference dose; skipped", record.id);
            skipped.push(record.id.clone());
            continue;
        };
        let started = Instant::now();
        let nested = pred.join(&record.id).join(DOSE_FILE);
        let path = if single && !nested.exists() {
            pred.join(DOSE_FILE)
        } else {
            nested
        };
        if !path.exists() {
            return Err(Error::MissingFile(path).into());
        }
        let prediction = load_grid(&path, *record.shape())?;
        let specs = if cfg.decision.dvh_specs.is_empty() {
            default_dvh_specs(&record)
        } else {
            cfg.decision.dvh_specs.clone()
        };
        rows.push(CohortRow {
            id: record.id.clone(),
            dose_score: dose_score(&prediction, ref_dose, &record.feasible)?,
            dvh_score: dvh_score(&prediction, ref_dose, &record, &specs)?,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let report = CohortReport::from_rows(rows, skipped);
    report.write_csv(&out)?;
    let mut stdout = std::io::stdout().lock();
    for r in &report.rows {
        writeln!(
            stdout,
            "{}: dose score {:.6} Gy, DVH score {:.6} Gy",
            r.id, r.dose_score, r.dvh_score
        )?;
    }
    if let (Some(d), Some(v)) = (report.dose_score, report.dvh_score) {
        writeln!(stdout, "mean: dose score {:.6} Gy, DVH score {:.6} Gy", d.mean, v.mean)?;
    }
    if !report.skipped.is_empty() {
        writeln!(stdout, "skipped without reference dose: {}", report.skipped.join(", "))?;
    }
    Ok(())
}

pub fn simulate(cfg: &EngineConfig, args: SimulateArgs) -> Result<()> {
    let out = required(args.out, &cfg.io.out, "out")?;
    let phantom = cfg.phantom_spec();
    let params = match args.params.or_else(|| cfg.io.params.clone()) {
        Some(path) => ParamVector::load(&path)?,
        None => {
            let outcome = fit_surrogate(&phantom, &cfg.features(&phantom), &cfg.surrogate_fit(), cfg.seed)?;
            info!(
                "fitted the initial surrogate: loss {:.4} -> {:.3e} Gy",
                outcome.losses[0],
                outcome.losses.last().unwrap()
            );
            outcome.params
        }
    };
    let spec = cfg.scenario(params)?;
    let outcome = run_scenario(&spec)?;

    create_dir(&out)?;
    write_fraction_logs_csv(&out.join("fractions.csv"), &outcome.logs)?;
    write_fraction_logs_json(&out.join("fractions.json"), &outcome.logs)?;
    let bands: Vec<_> = outcome
        .bands
        .iter()
        .flat_map(|(t, bands)| bands.iter().map(move |b| (format!("fraction_{t}"), b.clone())))
        .collect();
    write_dvh_bands(&out.join("dvh_bands.csv"), &bands)?;
    outcome.params.save(&out.join("final_params.txt"))?;
    if args.timing {
        write_timing_csv(&out.join("timing.csv"), &outcome.logs)?;
    }

    let mut stdout = std::io::stdout().lock();
    for l in &outcome.logs {
        writeln!(
            stdout,
            "fraction {:>2}: {:<12} TCP {:.4} NTCP {:.4} U {:.4} Gy{}",
            l.fraction,
            l.action,
            l.tcp,
            l.ntcp,
            l.u_t,
            if l.recalibrated { " (recalibrated)" } else { "" }
        )?;
    }
    Ok(())
}
