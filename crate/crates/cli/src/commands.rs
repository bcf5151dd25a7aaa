//! `simulate`, `fixed-point`, `flow` and `oracle`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use abf_core::fixedpoint::{equilibrium_density, AttractorMap, AttractorState, FixedPointResult};
use abf_core::grid::{Norm, PeriodicGrid};
use abf_core::kernel::KernelParams;
use abf_core::output::{
    estimates, fmt_f64, linear_fit, write_bias_snapshots, write_diagnostics, write_histogram,
    write_json, CsvWriter,
};
use abf_core::potential::{free_energy_reference, FreeEnergyOracle, PotentialSpec};
use abf_core::sampler::{self, flat_histogram_distance, BiasSchedule, SimConfig};
use abf_core::AbfError;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, FlowStart, Reference, Schedule};
use crate::{CliError, Context};

/// Sub-seed `k` of the config seed; distinct seeds give disjoint streams.
pub fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k)
}

pub fn numerical(e: AbfError) -> CliError {
    CliError::Numerical(e.to_string())
}

/// Opens `dir/name` for writing and hands a buffered writer to `body`.
pub fn write_file(
    dir: &Path,
    name: &str,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), CliError> {
    let path = dir.join(name);
    let io = |source| CliError::Io {
        path: path.clone(),
        source,
    };
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    body(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

pub fn write_json_file<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    write_file(dir, name, |w| write_json(w, value))
}

/// Runtime and version go here so the result files stay byte-stable.
fn write_metadata(ctx: &Context, command: &str, started: Instant) -> Result<(), CliError> {
    write_json_file(
        &ctx.out,
        "metadata.json",
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "runtime_seconds": started.elapsed().as_secs_f64(),
            "threads": rayon::current_num_threads(),
            "config": ctx.config,
        }),
    )
}

/// The z-grid, free-energy tables and kernel for `config` at width `eps`.
pub struct Setup {
    pub spec: PotentialSpec,
    pub grid: PeriodicGrid,
    pub oracle: FreeEnergyOracle,
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self, CliError> {
        let spec = config.potential_spec()?;
        let grid = PeriodicGrid::new(spec.m(), config.grid.nodes).map_err(numerical)?;
        let oracle = free_energy_reference(&spec, grid, config.grid.y_nodes).map_err(numerical)?;
        Ok(Setup { spec, grid, oracle })
    }

    pub fn map(&self, eps: f64) -> Result<AttractorMap, CliError> {
        let kernel = KernelParams::new(eps, self.spec.m()).map_err(numerical)?;
        AttractorMap::new(&self.oracle, &kernel).map_err(numerical)
    }
}

fn fixed_point_of(map: &AttractorMap, config: &ExperimentConfig) -> abf_core::Result<FixedPointResult> {
    let fp = &config.fixed_point;
    map.picard(&map.projector().zero_bias(), fp.tol, fp.max_iter)
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let c = &ctx.config;
    let s = &c.simulate;
    let setup = Setup::new(c)?;
    let eps = c.kernel.epsilon;
    let reference = match s.reference {
        Reference::None => None,
        Reference::FixedPoint => match fixed_point_of(&setup.map(eps)?, c) {
            Ok(r) => Some(r.a_inf),
            Err(e) => {
                eprintln!("abf: no reference fixed point ({e}); distances left empty");
                None
            }
        },
    };
    let mut sim = SimConfig::new(setup.spec.clone());
    sim.epsilon = eps;
    sim.grid_nodes = c.grid.nodes;
    sim.h = s.h;
    sim.n_steps = s.n_steps;
    sim.bias_refresh_stride = s.bias_refresh_stride;
    sim.seed = c.seed;
    if let Some(x0) = &s.x0 {
        sim.x0 = x0.clone();
    }
    sim.observables = s.observables.clone();
    sim.snapshot_stride = s.snapshot_stride;
    sim.replica_count = s.replica_count;
    sim.gradient_mode = s.gradient_mode;
    sim.schedule = match (s.schedule, s.freeze_after) {
        (Schedule::FrozenZero, _) => BiasSchedule::FrozenZero,
        (Schedule::Adaptive, None) => BiasSchedule::Adaptive,
        (Schedule::Adaptive, Some(step)) => BiasSchedule::FreezeAfter { step },
    };
    sim.batches = s.batches;
    sim.reference = reference.clone();
    sim.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let record = sampler::run(&sim).map_err(numerical)?;
    let est = estimates(&record).map_err(numerical)?;

    let out = &ctx.out;
    write_file(out, "bias_snapshots.csv", |w| write_bias_snapshots(&record, w))?;
    write_file(out, "histogram.csv", |w| write_histogram(&record, w))?;
    write_file(out, "diagnostics.csv", |w| write_diagnostics(&record, w))?;
    write_json_file(out, "estimates.json", &est)?;

    let final_values = record.final_bias.values();
    let final_l2 = final_values.lp_norm(Norm::Lp(2.0)).map_err(numerical)?;
    let last = record.diagnostics.last();
    let summary = json!({
        "epsilon": eps,
        "seed": c.seed,
        "n_steps": record.n_steps,
        "final_time": record.final_time(),
        "samples": record.accumulator.sample_count(),
        "final_bias": {
            "l2": final_l2,
            "c0": final_values.max_abs(),
            "max_gradient": record.final_bias.max_gradient(),
        },
        "max_bias_gradient": record.max_bias_gradient,
        "flat_histogram_tv": flat_histogram_distance(&record),
        "distance_to_fixed_point": {
            "c0": last.and_then(|d| d.c0),
            "w12": last.and_then(|d| d.w12),
        },
        "estimates": est,
    });
    write_json_file(out, "summary.json", &summary)?;
    write_metadata(ctx, "simulate", started)
}

#[derive(Debug, Serialize)]
struct FixedPointRow {
    epsilon: f64,
    status: &'static str,
    iterations: Option<usize>,
    converged: bool,
    w12: Option<f64>,
    w14: Option<f64>,
    c0: Option<f64>,
    contraction: Option<f64>,
}

pub fn fixed_point(ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let c = &ctx.config;
    let fp = &c.fixed_point;
    let setup = Setup::new(c)?;
    let rows: Vec<FixedPointRow> = fp
        .epsilons
        .par_iter()
        .enumerate()
        .map(|(i, &eps)| -> Result<FixedPointRow, CliError> {
            let map = setup.map(eps)?;
            let contraction = map
                .contraction(fp.contraction_radius, fp.contraction_trials, sub_seed(c.seed, 100 + i as u64))
                .map_err(numerical)?;
            let row = match fixed_point_of(&map, c) {
                Ok(r) => FixedPointRow {
                    epsilon: eps,
                    status: if r.converged { "converged" } else { "max_iter" },
                    iterations: Some(r.iterations),
                    converged: r.converged,
                    w12: Some(r.error.w12),
                    w14: Some(r.error.w14),
                    c0: Some(r.error.c0),
                    contraction: Some(contraction),
                },
                Err(AbfError::NonContraction { iteration, .. }) => FixedPointRow {
                    epsilon: eps,
                    status: "non_contraction",
                    iterations: Some(iteration),
                    converged: false,
                    w12: None,
                    w14: None,
                    c0: None,
                    contraction: Some(contraction),
                },
                Err(e) => return Err(numerical(e)),
            };
            Ok(row)
        })
        .collect::<Result<_, _>>()?;

    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    write_file(&ctx.out, "fixedpoint.csv", |w| {
        let mut csv = CsvWriter::new(
            w,
            &["epsilon", "status", "iterations", "converged", "w12", "w14", "c0", "contraction"],
        )?;
        for r in &rows {
            csv.row(&[
                fmt_f64(r.epsilon),
                r.status.to_string(),
                r.iterations.map(|n| n.to_string()).unwrap_or_default(),
                r.converged.to_string(),
                opt(r.w12),
                opt(r.w14),
                opt(r.c0),
                opt(r.contraction),
            ])?;
        }
        csv.finish().map(drop)
    })?;

    let usable: Vec<&FixedPointRow> = rows.iter().filter(|r| r.converged).collect();
    let fit = if usable.len() >= 2 && usable.iter().all(|r| r.w12.is_some_and(|e| e > 0.0)) {
        let x: Vec<f64> = usable.iter().map(|r| r.epsilon.ln()).collect();
        let y: Vec<f64> = usable.iter().map(|r| r.w12.unwrap_or(f64::NAN).ln()).collect();
        linear_fit(&x, &y)
    } else {
        None
    };
    let summary = json!({
        "potential": c.potential,
        "grid_nodes": c.grid.nodes,
        "w12_slope": fit.map(|f| f.slope),
        "w12_fit_r_squared": fit.map(|f| f.r_squared),
        "converged": usable.len(),
        "rows": rows,
    });
    write_json_file(&ctx.out, "summary.json", &summary)?;
    write_metadata(ctx, "fixed-point", started)?;
    if usable.is_empty() {
        return Err(CliError::Numerical(
            "the Picard iteration converged for no epsilon in the list".into(),
        ));
    }
    Ok(())
}

pub fn flow(ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let c = &ctx.config;
    let f = &c.flow;
    let eps = f.epsilon.unwrap_or(c.kernel.epsilon);
    let setup = Setup::new(c)?;
    let map = setup.map(eps)?;
    let fixed = fixed_point_of(&map, c).map_err(numerical)?;
    let reference = equilibrium_density(&fixed.a_inf, &setup.oracle);
    let q0 = match f.start {
        FlowStart::Uniform => AttractorState::uniform(setup.grid),
        FlowStart::Equilibrium => AttractorState::new(reference.clone()).map_err(numerical)?,
    };
    let traj = map.flow(&q0, &reference, f.t_end, f.dt).map_err(numerical)?;

    write_file(&ctx.out, "flow.csv", |w| {
        let mut csv = CsvWriter::new(w, &["t", "l2_distance", "mass"])?;
        for p in &traj.points {
            csv.row(&[fmt_f64(p.t), fmt_f64(p.distance), fmt_f64(p.mass)])?;
        }
        csv.finish().map(drop)
    })?;
    let fit = traj.log_distance_fit(f.fit_start, f.fit_end);
    let summary = json!({
        "epsilon": eps,
        "start": f.start,
        "dt": f.dt,
        "t_end": f.t_end,
        "initial_distance": traj.points[0].distance,
        "final_distance": traj.last().distance,
        "rate": fit.map(|fit| -fit.slope),
        "r_squared": fit.map(|fit| fit.r_squared),
        "fit_window": [f.fit_start, f.fit_end],
    });
    write_json_file(&ctx.out, "summary.json", &summary)?;
    write_metadata(ctx, "flow", started)
}

pub fn oracle(ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let setup = Setup::new(&ctx.config)?;
    let o = &setup.oracle;
    let m = setup.grid.dims();
    let mut header: Vec<String> = (1..=m).map(|a| format!("z{a}")).collect();
    header.push("a_star".into());
    header.push("a_star_bar".into());
    header.extend((1..=m).map(|a| format!("grad{a}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_file(&ctx.out, "oracle.csv", |w| {
        let mut csv = CsvWriter::new(w, &header)?;
        for node in 0..setup.grid.len() {
            let mut row: Vec<String> = setup.grid.node_coords(node).into_iter().map(fmt_f64).collect();
            row.push(fmt_f64(o.a_star().values()[node]));
            row.push(fmt_f64(o.a_star_bar().values()[node]));
            row.extend((0..m).map(|a| fmt_f64(o.grad_a_star().component(a)[node])));
            csv.row(&row)?;
        }
        csv.finish().map(drop)
    })?;
    write_metadata(ctx, "oracle", started)
}
