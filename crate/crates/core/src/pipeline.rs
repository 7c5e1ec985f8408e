//! Subcommand implementations. Each stage reads its prerequisites from the
//! output directory, checks their config hash and writes its own artifacts.
//!
//! ```text
//! <output_dir>/spinup/      manifest.txt base.wlnd snapshots.wlnd
//! <output_dir>/ensemble/    pod_eigenvalues.csv training/ test/
//! <output_dir>/koopman/     manifest.txt spectrum_<kernel>.csv gram_<kernel>.wlnd v_<kernel>.wlnd psi0_<kernel>.wlnd
//! <output_dir>/lyapunov/    modal_<kernel>.csv global_<kernel>.csv
//! <output_dir>/reconstruct/ errors_<kernel>.csv
//! <output_dir>/assimilate/  da_errors.csv observations_test0.csv coefficients_test0.csv estimate_test0.wlnd
//! ```

use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DMatrix;

use crate::assimilation::{self, SwathGeometry};
use crate::config::{RunConfig, Stage};
use crate::ensemble::{self, EnsembleRole, EnsembleSet};
use crate::error::{Error, Result};
use crate::field::{combine, Field2D};
use crate::forecast::{self, ErrorOptions};
use crate::io::{self, fmt_f64, Manifest, Record, Table};
use crate::kernels::{self, GramSystem, KernelFamily, KernelFeatures, KernelSpec};
use crate::koopman::{self, KoopmanSpectrum};
use crate::lyapunov::{self, lyapunov_time};
use crate::qg::{QgModel, Trajectory};

fn dir(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.output_dir.join(stage)
}

fn manifest_path(d: &Path) -> PathBuf {
    d.join("manifest.txt")
}

fn parse_list(s: &str, path: &Path) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse::<f64>().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                msg: format!("bad number `{x}`"),
            })
        })
        .collect()
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

/// Read a manifest written by `stage` and check its hash against `cfg`.
fn checked_manifest(cfg: &RunConfig, stage: Stage, d: &Path) -> Result<Manifest> {
    let path = manifest_path(d);
    let m = Manifest::read(&path, stage.name())?;
    m.check_hash(&path, &cfg.stage_hash(stage), stage.name())?;
    Ok(m)
}

pub fn cmd_spinup(cfg: &RunConfig) -> Result<()> {
    let model = QgModel::new(cfg.model)?;
    let proto = cfg.ensemble.base_protocol();
    info!("base protocol: t={} then {} snapshots", proto.t_establish, proto.n_snapshots);
    let run = ensemble::run_base_protocol(&model, &proto)?;
    let d = dir(cfg, "spinup");
    io::write_fields(&d.join("base.wlnd"), &[proto.t_establish], std::slice::from_ref(&run.base))?;
    let times: Vec<f64> = run.snapshots.times.iter().map(|t| proto.t_establish + t).collect();
    io::write_fields(&d.join("snapshots.wlnd"), &times, &run.snapshots.states)?;
    let mut m = Manifest::default();
    m.set("config_hash", cfg.stage_hash(Stage::Spinup));
    m.set("kind", "spinup");
    m.set("nx", cfg.model.nx);
    m.set("ny", cfg.model.ny);
    m.set("base_file", "base.wlnd");
    m.set("base_time", fmt_f64(proto.t_establish));
    m.set("snapshot_file", "snapshots.wlnd");
    m.set("n_snapshots", run.snapshots.len());
    m.write(&manifest_path(&d))
}

pub fn load_spinup(cfg: &RunConfig) -> Result<(Field2D, Vec<Field2D>)> {
    let d = dir(cfg, "spinup");
    checked_manifest(cfg, Stage::Spinup, &d)?;
    let l = cfg.model.domain_length;
    let (_, mut base) = io::read_fields(&d.join("base.wlnd"), l, "spinup")?;
    let (_, snaps) = io::read_fields(&d.join("snapshots.wlnd"), l, "spinup")?;
    let base = base.pop().ok_or_else(|| Error::Format {
        path: d.join("base.wlnd"),
        msg: "empty".into(),
    })?;
    Ok((base, snaps))
}

pub fn cmd_ensemble(cfg: &RunConfig) -> Result<()> {
    let (base, snaps) = load_spinup(cfg)?;
    let e = &cfg.ensemble;
    let pod = ensemble::compute_pod(&snaps, e.n_pod)?;
    let hash = cfg.stage_hash(Stage::Ensemble);
    let d = dir(cfg, "ensemble");
    let mut t = Table::new(&hash, &["mode", "eigenvalue"]);
    for (i, l) in pod.eigenvalues.iter().enumerate() {
        t.push(vec![i.to_string(), fmt_f64(*l)]);
    }
    t.write(&d.join("pod_eigenvalues.csv"))?;

    let model = QgModel::new(cfg.model)?;
    for (role, p, seed) in [
        (EnsembleRole::Training, e.p, e.seed_training),
        (EnsembleRole::Test, e.p_test, e.seed_test),
    ] {
        let init = ensemble::generate_members(&base, &pod, p, seed, &e.perturbation())?;
        let set = ensemble::spin_up_and_record(&model, &init, e.spin_up, e.horizon, e.output_every, seed, role)?;
        save_ensemble(&d.join(role.name()), &set, &hash)?;
    }
    Ok(())
}

pub fn save_ensemble(d: &Path, set: &EnsembleSet, hash: &str) -> Result<()> {
    let mut m = Manifest::default();
    m.set("config_hash", hash);
    m.set("kind", "ensemble");
    m.set("role", set.role.name());
    m.set("seed", set.seed);
    m.set("p", set.p());
    m.set("nx", set.params.nx);
    m.set("ny", set.params.ny);
    m.set("times", join_floats(set.times()));
    m.set(
        "member_ids",
        set.member_ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
    );
    let mut files = Vec::new();
    for (traj, id) in set.members.iter().zip(&set.member_ids) {
        let name = format!("member_{id:04}.wlnd");
        io::write_fields(&d.join(&name), &traj.times, &traj.states)?;
        files.push(name);
    }
    m.set("member_files", files.join(","));
    m.set("tendency_file", "tendencies.wlnd");
    let zeros = vec![0.0; set.p()];
    io::write_fields(&d.join("tendencies.wlnd"), &zeros, &set.initial_tendencies)?;
    m.write(&manifest_path(d))
}

pub fn load_ensemble(cfg: &RunConfig, role: EnsembleRole) -> Result<EnsembleSet> {
    let d = dir(cfg, "ensemble").join(role.name());
    let m = checked_manifest(cfg, Stage::Ensemble, &d)?;
    let mp = manifest_path(&d);
    let l = cfg.model.domain_length;
    let bad = |msg: String| Error::Format {
        path: mp.clone(),
        msg,
    };
    let times = parse_list(m.require("times", &mp)?, &mp)?;
    let member_ids: Vec<usize> = m
        .require("member_ids", &mp)?
        .split(',')
        .map(|s| s.parse().map_err(|_| bad(format!("bad member id `{s}`"))))
        .collect::<Result<_>>()?;
    let seed: u64 = m.require("seed", &mp)?.parse().map_err(|_| bad("bad seed".into()))?;
    let mut members = Vec::new();
    for name in m.require("member_files", &mp)?.split(',') {
        let (t, states) = io::read_fields(&d.join(name), l, "ensemble")?;
        if t != times {
            return Err(bad(format!("{name} times differ from the manifest")));
        }
        members.push(Trajectory { times: t, states });
    }
    let (_, initial_tendencies) = io::read_fields(&d.join(m.require("tendency_file", &mp)?), l, "ensemble")?;
    let set = EnsembleSet {
        members,
        initial_tendencies,
        seed,
        params: cfg.model,
        role,
        member_ids,
    };
    set.validate()?;
    Ok(set)
}

/// Kernel quantities of one family on the training anchors.
pub struct KernelProducts {
    pub spec: KernelSpec,
    pub features: KernelFeatures,
    pub gram: GramSystem,
    pub generator: DMatrix<f64>,
    pub skew: DMatrix<f64>,
    pub asymmetry: f64,
}

pub fn kernel_products(training: &EnsembleSet, spec: &KernelSpec) -> Result<KernelProducts> {
    let anchors = training.anchors();
    let features = KernelFeatures::new(&anchors, spec)?;
    let gram = kernels::gram_from_features(&features)?;
    let generator = kernels::generator_matrix(&anchors, &training.initial_tendencies, spec)?;
    let g = koopman::assemble_generator(&generator, &gram)?;
    Ok(KernelProducts {
        spec: *spec,
        features,
        gram,
        generator,
        skew: g.skew,
        asymmetry: g.asymmetry,
    })
}

/// Sorted `|omega|` of spectra recomputed at the given output times from
/// the stored states, averaged rank by rank.
pub fn averaged_omega_moduli(model: &QgModel, training: &EnsembleSet, spec: &KernelSpec, times: &[f64]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; training.p()];
    for &t in times {
        let k = training.time_index(t);
        let states: Vec<Field2D> = training.states_at(k).into_iter().cloned().collect();
        let tend = states.iter().map(|q| model.tendency(q)).collect::<Result<Vec<_>>>()?;
        let gram = kernels::gram_matrix(&states, spec)?;
        let m = kernels::generator_matrix(&states, &tend, spec)?;
        let s = koopman::assemble_generator(&m, &gram)?.skew;
        let mut w = lyapunov::modal_sigma(&koopman::spectrum(&s, &gram)?);
        w.sort_by(f64::total_cmp);
        for (a, v) in acc.iter_mut().zip(w) {
            *a += v / times.len() as f64;
        }
    }
    Ok(acc)
}

pub fn cmd_koopman(cfg: &RunConfig) -> Result<()> {
    let training = load_ensemble(cfg, EnsembleRole::Training)?;
    let hash = cfg.stage_hash(Stage::Koopman);
    let d = dir(cfg, "koopman");
    let mut man = Manifest::default();
    man.set("config_hash", &hash);
    man.set("kind", "koopman");
    man.set("p", training.p());
    for &family in &cfg.kernel.families {
        let spec = cfg.kernel.spec(family);
        let kp = kernel_products(&training, &spec)?;
        let sp = koopman::spectrum(&kp.skew, &kp.gram)?;
        let name = family.name();

        let mut t = Table::new(&hash, &["index", "omega", "abs_omega", "lyapunov_time"]);
        for (l, w) in sp.omegas.iter().enumerate() {
            t.push(vec![
                l.to_string(),
                fmt_f64(*w),
                fmt_f64(w.abs()),
                fmt_f64(lyapunov_time(w.abs(), cfg.lyapunov.c)),
            ]);
        }
        t.write(&d.join(format!("spectrum_{name}.csv")))?;
        io::write_records(
            &d.join(format!("gram_{name}.wlnd")),
            &[Record::from_matrix(&kp.gram.k, 0.0), Record::from_matrix(&kp.generator, 1.0)],
        )?;
        io::write_complex_matrix(&d.join(format!("v_{name}.wlnd")), &sp.v)?;
        io::write_complex_matrix(&d.join(format!("psi0_{name}.wlnd")), &sp.psi0)?;

        // kernels are carried by the flow, so K at the horizon should match K at t0
        let last = training.states_at(training.times().len() - 1);
        let last: Vec<Field2D> = last.into_iter().cloned().collect();
        let k_end = kernels::gram_matrix(&last, &spec)?.k;
        let drift = (&k_end - &kp.gram.k).norm() / kp.gram.k.norm();

        man.set(&format!("{name}.epsilon"), fmt_f64(kp.gram.epsilon));
        man.set(&format!("{name}.asymmetry"), fmt_f64(kp.asymmetry));
        man.set(&format!("{name}.measure_scale"), fmt_f64(sp.measure_scale));
        man.set(&format!("{name}.isometry_drift_at_horizon"), fmt_f64(drift));

        if !cfg.koopman.average_times.is_empty() {
            let model = QgModel::new(cfg.model)?;
            let avg = averaged_omega_moduli(&model, &training, &spec, &cfg.koopman.average_times)?;
            let mut t = Table::new(&hash, &["rank", "mean_abs_omega"]);
            for (r, w) in avg.iter().enumerate() {
                t.push(vec![r.to_string(), fmt_f64(*w)]);
            }
            t.write(&d.join(format!("averaged_abs_omega_{name}.csv")))?;
        }
    }
    man.write(&manifest_path(&d))
}

/// Spectrum written by `koopman`, reloaded bit for bit.
pub fn load_spectrum(cfg: &RunConfig, family: KernelFamily, measure_scale: f64) -> Result<KoopmanSpectrum> {
    let d = dir(cfg, "koopman");
    checked_manifest(cfg, Stage::Koopman, &d)?;
    let name = family.name();
    let csv = d.join(format!("spectrum_{name}.csv"));
    let omegas = Table::read(&csv, "koopman")?.float_column("omega", &csv)?;
    let v = io::read_complex_matrix(&d.join(format!("v_{name}.wlnd")), "koopman")?;
    let psi0 = io::read_complex_matrix(&d.join(format!("psi0_{name}.wlnd")), "koopman")?;
    if v.ncols() != omegas.len() || psi0.ncols() != omegas.len() {
        return Err(Error::Format {
            path: csv,
            msg: "spectrum size differs from eigenvector files".into(),
        });
    }
    Ok(KoopmanSpectrum {
        omegas,
        v,
        psi0,
        measure_scale,
    })
}

pub fn cmd_lyapunov(cfg: &RunConfig) -> Result<()> {
    let training = load_ensemble(cfg, EnsembleRole::Training)?;
    let hash = cfg.stage_hash(Stage::Lyapunov);
    let d = dir(cfg, "lyapunov");
    for &family in &cfg.kernel.families {
        let kp = kernel_products(&training, &cfg.kernel.spec(family))?;
        let sp = load_spectrum(cfg, family, kp.gram.measure_scale())?;
        let tl = koopman::tangent_linear_matrix(&kp.skew, &kp.gram)?;
        let rep = lyapunov::report(&sp, &kp.gram, &tl.t, cfg.lyapunov.c, cfg.lyapunov.sigma_threshold)?;
        let name = family.name();
        let mut t = Table::new(
            &hash,
            &["mode", "omega", "abs_omega", "kmle", "kmle_unscaled", "t_modal", "t_kmle"],
        );
        for l in 0..sp.p() {
            t.push(vec![
                l.to_string(),
                fmt_f64(sp.omegas[l]),
                fmt_f64(rep.modal_sigmas[l]),
                fmt_f64(rep.kmle_matched[l]),
                fmt_f64(rep.kmle_unscaled[l]),
                fmt_f64(rep.times_modal[l]),
                fmt_f64(rep.times_kmle[l]),
            ]);
        }
        t.write(&d.join(format!("modal_{name}.csv")))?;
        let mut g = Table::new(&hash, &["index", "sigma", "t_global"]);
        for (i, (s, tg)) in rep.global_sigmas.iter().zip(&rep.times_global).enumerate() {
            g.push(vec![i.to_string(), fmt_f64(*s), fmt_f64(*tg)]);
        }
        g.write(&d.join(format!("global_{name}.csv")))?;
    }
    Ok(())
}

pub fn cmd_reconstruct(cfg: &RunConfig) -> Result<()> {
    let training = load_ensemble(cfg, EnsembleRole::Training)?;
    let test = load_ensemble(cfg, EnsembleRole::Test)?;
    let hash = cfg.stage_hash(Stage::Reconstruct);
    let d = dir(cfg, "reconstruct");
    let opts = ErrorOptions {
        c: cfg.lyapunov.c,
        filter_mode: cfg.forecast.filter_mode,
    };
    for &family in &cfg.kernel.families {
        let kp = kernel_products(&training, &cfg.kernel.spec(family))?;
        let sp = load_spectrum(cfg, family, kp.gram.measure_scale())?;
        let ec = forecast::error_curves(&test, &training, &kp.features, &kp.gram, &sp, &opts)?;
        let mut t = Table::new(
            &hash,
            &[
                "time",
                "mean_err_plain",
                "std_plain",
                "mean_err_filtered",
                "std_filtered",
                "mean_err_mean",
                "std_mean",
                "err_projection",
                "std_projection",
            ],
        );
        for k in 0..ec.times.len() {
            t.push_floats(&[
                ec.times[k],
                ec.plain.mean[k],
                ec.plain.std[k],
                ec.filtered.mean[k],
                ec.filtered.std[k],
                ec.ensemble_mean.mean[k],
                ec.ensemble_mean.std[k],
                ec.projection.mean[k],
                ec.projection.std[k],
            ]);
        }
        t.write(&d.join(format!("errors_{}.csv", family.name())))?;
    }
    Ok(())
}

pub fn cmd_assimilate(cfg: &RunConfig) -> Result<()> {
    let training = load_ensemble(cfg, EnsembleRole::Training)?;
    let test = load_ensemble(cfg, EnsembleRole::Test)?;
    let hash = cfg.stage_hash(Stage::Assimilate);
    let d = dir(cfg, "assimilate");
    let setup = cfg.assim.setup();
    let curves = assimilation::da_error_curves(&test, &training, &setup, cfg.assim.single_time)?;
    let mut t = Table::new(
        &hash,
        &[
            "time",
            "mean_err_timeseries",
            "std_timeseries",
            "mean_err_single",
            "std_single",
            "mean_err_best_constant",
            "std_best_constant",
            "mean_err_mean",
            "std_mean",
        ],
    );
    for k in 0..curves.times.len() {
        t.push_floats(&[
            curves.times[k],
            curves.time_series.mean[k],
            curves.time_series.std[k],
            curves.single_time.mean[k],
            curves.single_time.std[k],
            curves.best_constant.mean[k],
            curves.best_constant.std[k],
            curves.ensemble_mean.mean[k],
            curves.ensemble_mean.std[k],
        ]);
    }
    t.write(&d.join("da_errors.csv"))?;

    // observations, coefficients and estimate for the first test member
    let grid = cfg.model.grid();
    let geom = SwathGeometry::new(&grid, &setup)?;
    let truth = &test.members[0];
    let obs = assimilation::synthesize_observations(truth, &geom, &setup, test.member_ids[0] as u64);
    let mut ot = Table::new(&hash, &["time", "location_x", "location_y", "value"]);
    for (time, vals) in obs.times.iter().zip(&obs.values) {
        for ((x, y), v) in obs.locations.iter().zip(vals.iter()) {
            ot.push_floats(&[*time, *x, *y, *v]);
        }
    }
    ot.write(&d.join("observations_test0.csv"))?;
    let r = assimilation::build_r(&training, &geom, &setup)?.with_noise(obs.sigma, setup.jitter_rel)?;
    let beta = assimilation::enoi_solve(&obs, &training, &geom, &r, setup.alpha)?;
    let best = assimilation::best_constant_coefficients(truth, &training, &setup.obs_times);
    let mut bt = Table::new(&hash, &["member", "beta_timeseries", "beta_best_constant"]);
    for i in 0..training.p() {
        bt.push(vec![training.member_ids[i].to_string(), fmt_f64(beta[i]), fmt_f64(best[i])]);
    }
    bt.write(&d.join("coefficients_test0.csv"))?;
    let est: Vec<Field2D> = (0..training.times().len())
        .map(|k| combine(beta.as_slice(), &training.states_at(k)))
        .collect();
    io::write_fields(&d.join("estimate_test0.wlnd"), training.times(), &est)
}

/// Every stage in order.
pub fn cmd_all(cfg: &RunConfig) -> Result<()> {
    cmd_spinup(cfg)?;
    cmd_ensemble(cfg)?;
    cmd_koopman(cfg)?;
    cmd_lyapunov(cfg)?;
    cmd_reconstruct(cfg)?;
    cmd_assimilate(cfg)
}
