use anyhow::Result;
use grr_core::grad::{finite_diff_check, GradInstance, GradOp, GradReport, Probe};
use grr_core::instances::{random_alignment_problem, LossFixture};
use grr_core::losses::NormP;
use grr_core::GrrError;
use serde::Serialize;

use super::{print_json, Outcome};
use crate::config::{GradOpName, RunConfig};

#[derive(Debug, Serialize)]
struct ReportJson {
    op: &'static str,
    max_rel_err: Option<f64>,
    max_abs_err: Option<f64>,
    n_params: usize,
    h: f64,
    threshold: f64,
    /// `pass`, `fail`, `near_singular_jacobian` or `degenerate_configuration`.
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<String>,
}

fn op_of(name: GradOpName) -> GradOp {
    match name {
        GradOpName::Rotation => GradOp::Rotation,
        GradOpName::Rigid => GradOp::Rigid,
        GradOpName::LossTotal => GradOp::LossTotal,
    }
}

/// Instance sizes: 12 rays for `rotation`, 16 points for `rigid`, a 4×4 grid
/// for `loss_total` (evaluated with the L2 norm, which is smooth).
fn check(cfg: &RunConfig, op: GradOp) -> Result<GradReport, GrrError> {
    let gc = &cfg.gradcheck;
    let seed = cfg.run_seed();
    match op {
        GradOp::LossTotal => {
            let mut fx = LossFixture::random(gc.size.unwrap_or(4), gc.noise, NormP::L2, seed)?;
            if gc.degenerate {
                let d = fx.syn.rays_pred.dirs[0];
                fx.syn.rays_pred.dirs.iter_mut().for_each(|v| *v = d);
            }
            finite_diff_check(op, &GradInstance::Loss(Box::new(fx.instance())), gc.h)
        }
        _ => {
            let size = gc
                .size
                .unwrap_or(if op == GradOp::Rotation { 12 } else { 16 });
            let problem =
                random_alignment_problem(op, size, gc.noise, gc.degenerate, seed.derive(0))?;
            let inst = GradInstance::Alignment {
                problem,
                probe: Probe::Cotangent(seed.derive(1)),
            };
            finite_diff_check(op, &inst, gc.h)
        }
    }
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let gc = &cfg.gradcheck;
    let op = op_of(gc.op);
    let mut json = ReportJson {
        op: op.name(),
        max_rel_err: None,
        max_abs_err: None,
        n_params: 0,
        h: gc.h,
        threshold: gc.threshold,
        status: "fail",
        detail: None,
    };
    let outcome = match check(cfg, op) {
        Ok(rep) => {
            json.max_rel_err = Some(rep.max_rel_err);
            json.max_abs_err = Some(rep.max_abs_err);
            json.n_params = rep.n_params();
            if rep.max_rel_err < gc.threshold {
                json.status = "pass";
                Outcome::Success
            } else {
                Outcome::CheckFailed
            }
        }
        Err(e @ GrrError::NearSingularJacobian { .. }) => {
            json.status = "near_singular_jacobian";
            json.detail = Some(e.to_string());
            Outcome::Degenerate
        }
        Err(e @ GrrError::DegenerateConfiguration { .. }) => {
            json.status = "degenerate_configuration";
            json.detail = Some(e.to_string());
            Outcome::Degenerate
        }
        Err(e) => return Err(e.into()),
    };
    print_json(&json)?;
    Ok(outcome)
}
