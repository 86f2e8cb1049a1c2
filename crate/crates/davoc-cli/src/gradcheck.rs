//! Gradient verification exposed as a command: per-layer probes against a
//! sum-of-squares objective, the closed-form reversal-layer contract, and
//! the full two-headed stacks.

use std::time::Instant;

use clap::ValueEnum;
use davoc::adapt::check_full_stack;
use davoc::models::ModelKind;
use davoc::net::{finite_difference_check, BiLstm, Dense, GradientReversal};
use davoc::rng;
use ndarray::{Array1, Array2, ArrayD};

use crate::{print_effective_config, resolve_seed, AppError};

/// Pass bound for all finite-difference probes.
pub const FD_THRESHOLD: f64 = 1e-4;
/// Pass bound for the reversal layer's backward scale, which is exact
/// arithmetic rather than a difference quotient.
pub const GRL_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Component {
    All,
    Dense,
    Bilstm,
    Grl,
    StackMlp,
    StackBlstm,
}

#[derive(clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    component: Component,
    /// Central-difference step for the layer probes (the stack checks pin
    /// their own 1e-5). Coarser steps degrade the reported errors; useful
    /// as a diagnostic.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Random coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 6)]
    coords: usize,
}

/// Probe one layer's analytic gradients against central differences of
/// `J = 0.5 * sum(forward(x)^2)`, whose logit gradient is the output itself.
macro_rules! sum_sq_check {
    ($layer:expr, $x:expr, $coords:expr, $eps:expr, $fd_rng:expr) => {{
        let layer = $layer;
        let x = $x;
        for p in layer.params_mut() {
            p.zero_grad();
        }
        let y = layer.forward(&x);
        layer.backward(&y);
        let analytic: Vec<ArrayD<f64>> = layer.params().iter().map(|p| p.grad.clone()).collect();
        let report = finite_difference_check(
            layer,
            |l| l.params_mut(),
            &mut |l| 0.5 * l.forward(&x).mapv(|v| v * v).sum(),
            &analytic,
            $coords,
            $eps,
            $fd_rng,
        );
        report.max_rel_err
    }};
}

fn check_dense(seed: u64, eps: f64, coords: usize) -> f64 {
    let mut init = rng::stream(seed, "cli.gradcheck/dense");
    let mut layer = Dense::new("d", 5, 4, &mut init);
    let x = Array2::from_shape_fn((3, 5), |_| rng::normal(&mut init));
    let mut fd_rng = rng::stream(seed, "cli.gradcheck/dense-coords");
    sum_sq_check!(&mut layer, x, coords, eps, &mut fd_rng)
}

fn check_bilstm(seed: u64, eps: f64, coords: usize) -> f64 {
    let mut init = rng::stream(seed, "cli.gradcheck/bilstm");
    let mut layer = BiLstm::new("l", 3, 4, &mut init);
    let x = Array2::from_shape_fn((6, 3), |_| rng::normal(&mut init));
    let mut fd_rng = rng::stream(seed, "cli.gradcheck/bilstm-coords");
    sum_sq_check!(&mut layer, x, coords, eps, &mut fd_rng)
}

/// Forward deviation from the identity and backward deviation from
/// `-lambda * g`, both closed-form.
fn check_grl(seed: u64) -> (f64, f64) {
    let mut r = rng::stream(seed, "cli.gradcheck/grl");
    let z = Array1::from_shape_fn(16, |_| rng::normal(&mut r));
    let dz = Array1::from_shape_fn(16, |_| rng::normal(&mut r));
    let lambda = 0.7;
    let grl = GradientReversal::new(lambda);
    let forward_dev = grl
        .forward(&z)
        .iter()
        .zip(z.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let back = grl.backward(&dz);
    let backward_rel = back
        .iter()
        .zip(dz.iter())
        .fold(0.0f64, |m, (b, d)| {
            let want = -lambda * d;
            m.max((b - want).abs() / want.abs().max(1e-12))
        });
    (forward_dev, backward_rel)
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), AppError> {
    let (seed, seed_src) = resolve_seed(args.seed)?;
    if !(args.eps.is_finite() && args.eps > 0.0) {
        return Err(AppError::Config(format!("--eps must be positive, got {}", args.eps)));
    }
    print_effective_config(
        "gradcheck",
        &[
            ("component", format!("{:?}", args.component).to_lowercase()),
            ("eps", args.eps.to_string()),
            ("coords", args.coords.to_string()),
            ("seed", format!("{seed} ({seed_src})")),
        ],
    );

    let t0 = Instant::now();
    let want = |c: Component| args.component == Component::All || args.component == c;
    let mut breaches = Vec::new();
    fn report(breaches: &mut Vec<String>, name: &str, err: f64, threshold: f64) {
        let ok = err < threshold;
        println!(
            "component={name} worst_rel_err={err:.3e} threshold={threshold:.0e} status={}",
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            breaches.push(format!("{name} {err:.3e} >= {threshold:.0e}"));
        }
    }

    if want(Component::Dense) {
        report(&mut breaches, "dense", check_dense(seed, args.eps, args.coords), FD_THRESHOLD);
    }
    if want(Component::Bilstm) {
        report(&mut breaches, "bilstm", check_bilstm(seed, args.eps, args.coords), FD_THRESHOLD);
    }
    if want(Component::Grl) {
        let (fwd, back) = check_grl(seed);
        let ok = fwd == 0.0 && back < GRL_THRESHOLD;
        println!(
            "component=grl forward_deviation={fwd:.3e} backward_rel_err={back:.3e} threshold={GRL_THRESHOLD:.0e} status={}",
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            breaches.push(format!("grl forward {fwd:.3e} / backward {back:.3e}"));
        }
    }
    if want(Component::StackMlp) {
        let r = check_full_stack(ModelKind::Mlp, seed, args.coords);
        report(&mut breaches, "stack-mlp", r.max_rel_err(), FD_THRESHOLD);
    }
    if want(Component::StackBlstm) {
        let r = check_full_stack(ModelKind::Blstm, seed, args.coords);
        report(&mut breaches, "stack-blstm", r.max_rel_err(), FD_THRESHOLD);
    }
    println!("elapsed={:.2?}", t0.elapsed());

    if breaches.is_empty() {
        Ok(())
    } else {
        Err(AppError::Threshold(format!(
            "gradient check breached: {}",
            breaches.join("; ")
        )))
    }
}
