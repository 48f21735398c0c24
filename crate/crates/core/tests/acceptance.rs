//! Acceptance suite. Each test runs one criterion at its pinned tolerance
//! and prints a single `ACCEPTANCE <name>: PASS|FAIL (...)` line. The
//! determinism test reruns every other criterion and compares result CSVs
//! byte for byte.

use std::io::Write;
use std::sync::OnceLock;

use cqc_core::baselines::{invert_cqc, s_learner_cqc, GridSpec};
use cqc_core::dataset::{Arm, Sample};
use cqc_core::model::{affine_features, Activation, CqcModel, FeatureMap, LinearCqc, MlpCqc};
use cqc_core::nuisance::{oracle_nuisances, ConditionalCdf, GaussianConditional, NoiseTarget, DEFAULT_CLIP};
use cqc_core::objective::{dr_gradient, loss_quadrature, pointwise_loss, Y0Sampler, Y0Source, DEFAULT_NODES};
use cqc_core::optimizer::{default_radius, empirical_rho, fit_sgd, Passes, ScheduleSpec, SgdConfig};
use cqc_core::objective::GradKind;
use cqc_core::rng::rng_from;
use cqc_core::simlab::{
    aggregate_csv, eval_points, population_excess_loss, results_csv, run_experiment, Axis, DesignChoice, DgpSpec,
    ExperimentOutput, ExperimentPlan, MethodTag, MetricsRecord, Settings,
};
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
    csv: String,
}

/// Writes past the test harness capture so the line shows in plain runs.
fn report(name: &str, o: &Outcome) {
    let line = format!(
        "ACCEPTANCE {name}: {} ({})\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn e(v: f64) -> String {
    format!("{v:.17e}")
}

// Independent closed forms built on libm rather than the crate's helpers.
fn phi_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)
}

fn phi_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// ---------------------------------------------------------------------------
// Gradient unbiasedness

fn gradient_unbiasedness() -> Outcome {
    const DRAWS: usize = 1_000_000;
    let dgp = DgpSpec::cos_linear(2.0);
    let nuis = oracle_nuisances(&dgp, DEFAULT_CLIP);
    let mut r = rng_from(101, &[]);
    let mut csv = String::from("point,coord,mc_mean,mc_se,oracle\n");
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for point in 0..20 {
        let theta: Vec<f64> = (0..4).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let model = CqcModel::Linear(LinearCqc::new(theta, FeatureMap::affine(1)).unwrap());
        let x = vec![r.sample::<f64, _>(StandardNormal)];
        let y0: f64 = r.sample::<f64, _>(StandardNormal) + (6.0 * x[0]).cos();
        let c = model.value(y0, &x).unwrap();
        // ∇θℓ = (F₁(c|x) − F₀(y₀|x))·φ(y₀, x)
        let f1 = phi_cdf((c - 2.0 * (6.0 * x[0]).cos() - 2.0 * x[0]) / 2.0);
        let f0 = phi_cdf(y0 - (6.0 * x[0]).cos());
        let oracle: Vec<f64> = affine_features(y0, &x).iter().map(|p| (f1 - f0) * p).collect();

        let mut sum = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..DRAWS {
            let a = if r.random::<f64>() < dgp.propensity(&x) {
                Arm::Treated
            } else {
                Arm::Control
            };
            let u: f64 = r.sample(StandardNormal);
            let y = dgp.mean(a, &x) + dgp.sigma(a) * u;
            let z = Sample { y, x: x.clone(), a };
            let g = dr_gradient(&model, &nuis, y0, &z).unwrap().grad;
            for k in 0..4 {
                sum[k] += g[k];
                sq[k] += g[k] * g[k];
            }
        }
        for k in 0..4 {
            let n = DRAWS as f64;
            let m = sum[k] / n;
            let var = (sq[k] / n - m * m) * n / (n - 1.0);
            let se = (var.max(0.0) / n).sqrt();
            let z = (m - oracle[k]).abs() / se.max(1e-300);
            worst = worst.max(z);
            if (m - oracle[k]).abs() > 4.0 * se {
                pass = false;
            }
            csv.push_str(&format!("{point},{k},{},{},{}\n", e(m), e(se), e(oracle[k])));
        }
    }
    Outcome {
        pass,
        detail: format!("max |mean − oracle| = {worst:.2} standard errors over 80 coordinates, bound 4"),
        csv,
    }
}

// ---------------------------------------------------------------------------
// Loss oracle agreement

fn loss_oracle() -> Outcome {
    const N: usize = 1_000_000;
    const STATED: f64 = 0.18436;
    // ∫₀¹ (Φ(t) − ½) dt by a fine trapezoid rule.
    let exact = {
        let m = 200_000;
        let h = 1.0 / m as f64;
        let mut s = 0.5 * ((phi_cdf(0.0) - 0.5) + (phi_cdf(1.0) - 0.5));
        for k in 1..m {
            s += phi_cdf(k as f64 * h) - 0.5;
        }
        s * h
    };
    let dgp = DgpSpec::affine(1, 0.0, vec![0.0], 0.0, vec![0.0], 1.0, 1.0, 0.0, vec![0.0]).unwrap();
    let nuis = oracle_nuisances(&dgp, DEFAULT_CLIP);
    let data = dgp.generate(N, 202).unwrap();
    // θ giving cqc_θ ≡ 1; y₀ = 0 so cqc* = 0.
    let model = CqcModel::Linear(LinearCqc::new(vec![0.0, 0.0, 0.0, 1.0], FeatureMap::affine(1)).unwrap());
    let batch: Vec<(f64, &Sample)> = data.iter().map(|s| (0.0, s)).collect();
    let rep = loss_quadrature(&model, &nuis, &batch, DEFAULT_NODES, 0.0).unwrap();
    let mean = rep.mean_loss;
    let sd = {
        let v: f64 = rep.per_sample.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (N as f64 - 1.0);
        v.sqrt()
    };
    let se = sd / (N as f64).sqrt();
    let mc_ok = (mean - STATED).abs() <= 3.0 * se && (mean - exact).abs() <= 3.0 * se;

    // Simpson at 129 nodes against the closed-form antiderivative.
    let g = |u: f64| u * phi_cdf(u) + phi_pdf(u);
    let mut r = rng_from(203, &[]);
    let mut worst: f64 = 0.0;
    let mut csv = format!("mc_mean,mc_se,exact,stated\n{},{},{},{}\n", e(mean), e(se), e(exact), e(STATED));
    csv.push_str("mu,sd,c,c_star,f0,simpson,closed_form\n");
    for _ in 0..1000 {
        let mu: f64 = 3.0 * r.sample::<f64, _>(StandardNormal);
        let sdv: f64 = 0.5 + 2.0 * r.random::<f64>();
        let cs = mu + sdv * r.sample::<f64, _>(StandardNormal);
        let c = cs + sdv * (8.0 * r.random::<f64>() - 4.0);
        let f0: f64 = phi_cdf((cs - mu) / sdv);
        let q = pointwise_loss(&GaussianConditional { mean: mu, sd: sdv }, f0, c, cs, DEFAULT_NODES);
        let closed = sdv * (g((c - mu) / sdv) - g((cs - mu) / sdv)) - f0 * (c - cs);
        worst = worst.max((q - closed).abs());
        csv.push_str(&format!("{},{},{},{},{},{},{}\n", e(mu), e(sdv), e(c), e(cs), e(f0), e(q), e(closed)));
    }
    let quad_ok = worst <= 1e-8;
    Outcome {
        pass: mc_ok && quad_ok,
        detail: format!(
            "MC mean {mean:.6} ± {se:.1e} (stated {STATED}, exact {exact:.10}); max Simpson error {worst:.1e} ≤ 1e-8"
        ),
        csv,
    }
}

// ---------------------------------------------------------------------------
// Loss bounds

struct Uniform {
    lo: f64,
    width: f64,
}

impl ConditionalCdf for Uniform {
    fn cdf(&self, y: f64) -> f64 {
        ((y - self.lo) / self.width).clamp(0.0, 1.0)
    }
}

struct Exponential {
    lo: f64,
    rate: f64,
}

impl ConditionalCdf for Exponential {
    fn cdf(&self, y: f64) -> f64 {
        if y <= self.lo {
            0.0
        } else {
            -(-self.rate * (y - self.lo)).exp_m1()
        }
    }
}

#[derive(Default)]
struct BoundTally {
    upper: usize,
    lower: usize,
    lower_above: usize,
    lower_below: usize,
}

fn loss_bounds() -> Outcome {
    const M: usize = 10_000;
    const SLACK: f64 = 1e-9;
    let mut r = rng_from(303, &[]);
    let mut csv = String::from("family,c,c_star,loss,f1_c,f1_star\n");
    let affine_c = |r: &mut cqc_core::rng::SimRng, y0: f64, x: f64| {
        let t: Vec<f64> = (0..4).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        t[0] * x * y0 + t[1] * y0 + t[2] * x + t[3]
    };

    // Gaussian treated arm (σ₁ = 2): upper bound and bounded-density bound.
    let dgp = DgpSpec::cos_linear(2.0);
    let mubar = 1.0 / (dgp.sigma1 * (2.0 * std::f64::consts::PI).sqrt());
    let mut gauss = BoundTally::default();
    for _ in 0..M {
        let x = vec![r.sample::<f64, _>(StandardNormal)];
        let y0 = dgp.mean(Arm::Control, &x) + r.sample::<f64, _>(StandardNormal);
        let c = affine_c(&mut r, y0, x[0]);
        let cs = dgp.cqc(y0, &x);
        let f1 = GaussianConditional {
            mean: dgp.mean(Arm::Treated, &x),
            sd: dgp.sigma1,
        };
        let f0 = phi_cdf(y0 - dgp.mean(Arm::Control, &x));
        let loss = pointwise_loss(&f1, f0, c, cs, DEFAULT_NODES);
        let (fc, fs) = (f1.cdf(c), f1.cdf(cs));
        gauss.upper += usize::from(loss > (c - cs).abs() * (fc - fs).abs() + SLACK);
        gauss.lower += usize::from((fc - fs).powi(2) > 2.0 * mubar * loss + SLACK);
        csv.push_str(&format!("gaussian,{},{},{},{},{}\n", e(c), e(cs), e(loss), e(fc), e(fs)));
    }

    // Uniform treated arm on [sin x, sin x + 2]: density ≥ ½ on its support.
    // Model outputs are restricted to the support, where the hypothesis holds.
    let mut unif = BoundTally::default();
    let mut k = 0;
    while k < M {
        let x: f64 = r.sample(StandardNormal);
        let y0: f64 = r.sample(StandardNormal);
        let f1 = Uniform { lo: x.sin(), width: 2.0 };
        let c = affine_c(&mut r, y0, x);
        if !(c >= f1.lo && c <= f1.lo + f1.width) {
            continue;
        }
        k += 1;
        let q = phi_cdf(y0);
        let cs = f1.lo + f1.width * q;
        let loss = pointwise_loss(&f1, q, c, cs, DEFAULT_NODES);
        let (fc, fs) = (f1.cdf(c), f1.cdf(cs));
        let eta = 1.0 / f1.width;
        unif.upper += usize::from(loss > (c - cs).abs() * (fc - fs).abs() + SLACK);
        unif.lower += usize::from(eta * (c - cs).powi(2) > 2.0 * loss + SLACK);
        csv.push_str(&format!("uniform,{},{},{},{},{}\n", e(c), e(cs), e(loss), e(fc), e(fs)));
    }

    // Exponential treated arm from x with rate e^{0.3x}: decreasing density.
    let mut expo = BoundTally::default();
    let mut k = 0;
    while k < M {
        let x: f64 = r.sample(StandardNormal);
        let y0: f64 = r.sample(StandardNormal);
        let f1 = Exponential {
            lo: x,
            rate: (0.3 * x).exp(),
        };
        let c = affine_c(&mut r, y0, x);
        if c < f1.lo {
            continue;
        }
        k += 1;
        let q = phi_cdf(y0);
        let cs = f1.lo - (-q).ln_1p() / f1.rate;
        let loss = pointwise_loss(&f1, q, c, cs, DEFAULT_NODES);
        let (fc, fs) = (f1.cdf(c), f1.cdf(cs));
        let prod = (c - cs).abs() * (fc - fs).abs();
        expo.upper += usize::from(loss > prod + SLACK);
        let bad = prod > 2.0 * loss + SLACK;
        expo.lower += usize::from(bad);
        if c >= cs {
            expo.lower_above += usize::from(bad);
        } else {
            expo.lower_below += usize::from(bad);
        }
        csv.push_str(&format!("exponential,{},{},{},{},{}\n", e(c), e(cs), e(loss), e(fc), e(fs)));
    }

    let total = gauss.upper + gauss.lower + unif.upper + unif.lower + expo.upper + expo.lower;
    Outcome {
        pass: total == 0,
        detail: format!(
            "violations of {M}: upper gaussian {}, uniform {}, exponential {}; lower (a) {}, (b) {}, (c) {} \
             [{} with cqc_θ ≥ cqc*, {} with cqc_θ < cqc*]",
            gauss.upper, unif.upper, expo.upper, gauss.lower, unif.lower, expo.lower, expo.lower_above, expo.lower_below
        ),
        csv,
    }
}

// ---------------------------------------------------------------------------
// Rate check for the convex theorem schedule

fn sgd_rate() -> Outcome {
    const R: usize = 100;
    let dgp = DgpSpec::cos_linear(2.0);
    let nuis = oracle_nuisances(&dgp, DEFAULT_CLIP);
    let eval = eval_points(&dgp, 2000, 404);
    let template = CqcModel::Linear(LinearCqc::zeros(FeatureMap::affine(1)));
    let mut csv = String::from("n,replication,radius,rho,step,excess_loss\n");
    let mut means = Vec::new();
    for &n in &[500usize, 8000] {
        let mut losses = Vec::with_capacity(R);
        for rep in 0..R {
            let data = dgp.generate(n, cqc_core::rng::derive_seed(405, &[n as u64, rep as u64])).unwrap();
            let untreated = data.outcomes(Arm::Control);
            let src = Y0Source::new(&Y0Sampler::Unconditional, &untreated, None).unwrap();
            let radius = default_radius(&template, &data, 1e-3).unwrap();
            let lo = untreated.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = untreated.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pts: Vec<(f64, &[f64])> = data
                .iter()
                .flat_map(|z| [(lo, z.x.as_slice()), (hi, z.x.as_slice())])
                .collect();
            let rho = empirical_rho(&template, &pts).unwrap();
            let schedule = ScheduleSpec::TheoremConvex {
                radius,
                a_clip: DEFAULT_CLIP,
                rho,
            };
            let cfg = SgdConfig {
                schedule,
                radius: Some(radius),
                passes: Passes::SinglePass,
                grad: GradKind::Dr,
                seed: cqc_core::rng::derive_seed(406, &[n as u64, rep as u64]),
            };
            let res = fit_sgd(&template, &nuis, &data, &src, &cfg, None).unwrap();
            let model = res.estimate(&template);
            let loss = population_excess_loss(&model, &dgp, &eval);
            csv.push_str(&format!(
                "{n},{rep},{},{},{},{}\n",
                e(radius),
                e(rho),
                e(schedule.step(1, n)),
                e(loss)
            ));
            losses.push(loss);
        }
        means.push(losses.iter().sum::<f64>() / R as f64);
    }
    let ratio = means[1] / means[0];
    Outcome {
        pass: (0.15..=0.6).contains(&ratio),
        detail: format!(
            "mean excess loss n=500 {:.4e}, n=8000 {:.4e}, ratio {ratio:.3} (target [0.15, 0.6])",
            means[0], means[1]
        ),
        csv,
    }
}

// ---------------------------------------------------------------------------
// Simulation sweeps

fn tag(s: &str) -> MethodTag {
    s.parse().unwrap()
}

/// Learning rates tried by the 80/20 validation search before each fit.
const LR_GRID: [f64; 5] = [0.001, 0.003, 0.01, 0.03, 0.1];

fn plan(design: (&str, usize, f64), axis: Axis, methods: &[&str], reps: usize, seed: u64, n: usize) -> ExperimentPlan {
    ExperimentPlan {
        design: DesignChoice {
            name: design.0.into(),
            d: design.1,
            gamma: design.2,
        },
        axis,
        methods: methods.iter().map(|m| tag(m)).collect(),
        replications: reps,
        base_seed: seed,
        eval_points: 2000,
        settings: Settings {
            n,
            lr_grid: Some(LR_GRID.to_vec()),
            ..Settings::default()
        },
    }
}

fn sweep_csv(out: &ExperimentOutput) -> String {
    format!("{}{}", results_csv(&out.rows), aggregate_csv(&out.records))
}

fn rec<'a>(out: &'a ExperimentOutput, value: &str, method: &str) -> &'a MetricsRecord {
    out.record(value, tag(method)).expect("record present")
}

fn describe(r: &MetricsRecord) -> String {
    format!("{:.4}±{:.4}", r.mean, r.ci)
}

fn slope_sweep() -> Outcome {
    let p = plan(
        ("sin_linear", 10, 2.0),
        Axis::Slope {
            gammas: vec![0.0, 2.0, 4.0, 6.0],
        },
        &["dr_lin:estimated", "invert_dr:estimated"],
        100,
        505,
        500,
    );
    let out = run_experiment(&p, None).unwrap();
    let dr6 = rec(&out, "6", "dr_lin:estimated");
    let inv6 = rec(&out, "6", "invert_dr:estimated");
    let separated = dr6.upper() < inv6.lower();
    let dr: Vec<f64> = ["0", "2", "4", "6"]
        .iter()
        .map(|g| rec(&out, g, "dr_lin:estimated").mean)
        .collect();
    let spread = dr.iter().cloned().fold(f64::MIN, f64::max) / dr.iter().cloned().fold(f64::MAX, f64::min);
    let fails: usize = out.records.iter().map(|r| r.failures).sum();
    Outcome {
        pass: separated && spread < 2.0 && fails == 0,
        detail: format!(
            "γ=6: DR-Lin {} vs Inv-DR {} (CIs disjoint: {separated}); DR-Lin max/min over γ {spread:.3} < 2; \
             DR-Lin by γ {:?}; Inv-DR by γ {:?}; failures {fails}",
            describe(dr6),
            describe(inv6),
            dr.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            ["0", "2", "4", "6"]
                .iter()
                .map(|g| format!("{:.3}", rec(&out, g, "invert_dr:estimated").mean))
                .collect::<Vec<_>>(),
        ),
        csv: sweep_csv(&out),
    }
}

fn nuisance_noise() -> Outcome {
    let all = plan(
        ("sin_linear", 10, 2.0),
        Axis::NuisanceNoise {
            levels: vec![0.0, 0.5],
            targets: vec![NoiseTarget::Propensity, NoiseTarget::Ccdf0, NoiseTarget::Ccdf1],
            bias: 1.0,
        },
        &["dr_lin:estimated", "ipw:estimated"],
        100,
        606,
        500,
    );
    let out = run_experiment(&all, None).unwrap();
    let infl = |m: &str| rec(&out, "0.5", m).mean - rec(&out, "0", m).mean;
    let (dr_infl, ipw_infl) = (infl("dr_lin:estimated"), infl("ipw:estimated"));

    let mut ccdf_only = all.clone();
    ccdf_only.methods = vec![tag("dr_lin:estimated")];
    ccdf_only.axis = Axis::NuisanceNoise {
        levels: vec![0.0, 0.5],
        targets: vec![NoiseTarget::Ccdf0, NoiseTarget::Ccdf1],
        bias: 1.0,
    };
    let out2 = run_experiment(&ccdf_only, None).unwrap();
    let base = rec(&out2, "0", "dr_lin:estimated");
    let noisy = rec(&out2, "0.5", "dr_lin:estimated");
    let within = (noisy.mean - base.mean).abs() <= 2.0 * base.ci;
    let fails: usize = out.records.iter().chain(&out2.records).map(|r| r.failures).sum();
    Outcome {
        pass: dr_infl < ipw_infl && within && fails == 0,
        detail: format!(
            "both perturbed: DR {} → {} (inflation {dr_infl:.4}) vs IPW {} → {} (inflation {ipw_infl:.4}); \
             CCDF-only DR level 0 {} vs 0.5 {} (|Δ| ≤ 2 half-widths: {within}); failures {fails}",
            describe(rec(&out, "0", "dr_lin:estimated")),
            describe(rec(&out, "0.5", "dr_lin:estimated")),
            describe(rec(&out, "0", "ipw:estimated")),
            describe(rec(&out, "0.5", "ipw:estimated")),
            describe(base),
            describe(noisy)
        ),
        csv: sweep_csv(&out) + &sweep_csv(&out2),
    }
}

fn sample_size_monotone() -> Outcome {
    let p = plan(
        ("sin_linear", 10, 2.0),
        Axis::SampleSize {
            ns: vec![250, 500, 1000, 2000],
        },
        &["dr_lin:estimated"],
        50,
        707,
        500,
    );
    let out = run_experiment(&p, None).unwrap();
    let m: Vec<f64> = ["250", "500", "1000", "2000"]
        .iter()
        .map(|n| rec(&out, n, "dr_lin:estimated").mean)
        .collect();
    let decreasing = m.windows(2).all(|w| w[1] < w[0]);
    Outcome {
        pass: decreasing,
        detail: format!("DR-Lin mean MAE by n {:?}", m.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()),
        csv: sweep_csv(&out),
    }
}

fn y0_sampler_insensitivity() -> Outcome {
    let p = plan(
        ("cos_linear", 1, 2.0),
        Axis::Y0SamplerSweep {
            samplers: vec![Y0Sampler::uniform_default(), Y0Sampler::Unconditional, Y0Sampler::Conditional],
        },
        &["dr_lin:estimated"],
        30,
        1010,
        2000,
    );
    let out = run_experiment(&p, None).unwrap();
    let recs: Vec<&MetricsRecord> = ["uniform", "unconditional", "conditional"]
        .iter()
        .map(|s| rec(&out, s, "dr_lin:estimated"))
        .collect();
    let mut overlap = true;
    for i in 0..3 {
        for j in i + 1..3 {
            overlap &= recs[i].lower() <= recs[j].upper() && recs[j].lower() <= recs[i].upper();
        }
    }
    Outcome {
        pass: overlap,
        detail: format!(
            "uniform {}, unconditional {}, conditional {}; pairwise overlap {overlap}",
            describe(recs[0]),
            describe(recs[1]),
            describe(recs[2])
        ),
        csv: sweep_csv(&out),
    }
}

// ---------------------------------------------------------------------------
// Baselines with exact nuisances

fn baseline_recovery() -> Outcome {
    let grid = GridSpec::new(-40.0, 40.0, 8001).unwrap();
    let h = grid.spacing();
    let mut csv = String::from("design,y0,cqc_star,invert,s_learner\n");
    let mut worst: f64 = 0.0;
    let mut outside = 0;
    for (k, dgp) in [DgpSpec::sin_linear(2.0, 10, 808).unwrap(), DgpSpec::cos_linear(2.0), DgpSpec::fig1()]
        .into_iter()
        .enumerate()
    {
        let nuis = oracle_nuisances(&dgp, DEFAULT_CLIP);
        for (y0, x) in eval_points(&dgp, 1000, 809 + k as u64) {
            let cs = dgp.cqc(y0, &x);
            if !(cs > grid.lo && cs < grid.hi) {
                outside += 1;
            }
            let inv = invert_cqc(&nuis, y0, &x, &grid).unwrap();
            let sl = s_learner_cqc(&*nuis.ccdf0, &*nuis.ccdf1, y0, &x, &grid).unwrap();
            worst = worst.max((inv - cs).abs()).max((sl - cs).abs());
            csv.push_str(&format!("{},{},{},{},{}\n", dgp.name(), e(y0), e(cs), e(inv), e(sl)));
        }
    }
    Outcome {
        pass: worst <= h * (1.0 + 1e-9) && outside == 0,
        detail: format!("max error {worst:.3e} vs grid spacing {h:.3e} over 3000 queries; queries off-grid {outside}"),
        csv,
    }
}

// ---------------------------------------------------------------------------
// Network gradients

fn mlp_gradients() -> Outcome {
    let mut csv = String::from("activation,point,rel_error\n");
    let mut worst = [0.0f64; 2];
    for (ai, act) in [Activation::Tanh, Activation::Relu].into_iter().enumerate() {
        let mut r = rng_from(909, &[ai as u64]);
        for point in 0..100 {
            let mut model = CqcModel::Mlp(MlpCqc::new(3, &[20, 20], act, 910 + point));
            let x: Vec<f64> = (0..3).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let y0: f64 = r.sample(StandardNormal);
            let (_, g) = model.eval_and_grad(y0, &x).unwrap();
            let step = 1e-6;
            let mut fd = vec![0.0; g.len()];
            for k in 0..g.len() {
                let orig = model.params()[k];
                model.params_mut()[k] = orig + step;
                let up = model.value(y0, &x).unwrap();
                model.params_mut()[k] = orig - step;
                let dn = model.value(y0, &x).unwrap();
                model.params_mut()[k] = orig;
                fd[k] = (up - dn) / (2.0 * step);
            }
            let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
            let rel = diff / scale.max(1e-12);
            worst[ai] = worst[ai].max(rel);
            csv.push_str(&format!("{act:?},{point},{}\n", e(rel)));
        }
    }
    Outcome {
        pass: worst[0] <= 1e-4 && worst[1] <= 1e-2,
        detail: format!("max relative error tanh {:.2e} (≤ 1e-4), relu {:.2e} (≤ 1e-2)", worst[0], worst[1]),
        csv,
    }
}

// ---------------------------------------------------------------------------
// Harness

type Criterion = fn() -> Outcome;

const CRITERIA: [(&str, Criterion); 10] = [
    ("gradient_unbiasedness", gradient_unbiasedness),
    ("loss_oracle", loss_oracle),
    ("loss_bounds", loss_bounds),
    ("sgd_rate", sgd_rate),
    ("slope_sweep", slope_sweep),
    ("nuisance_noise", nuisance_noise),
    ("sample_size_monotone", sample_size_monotone),
    ("baseline_recovery", baseline_recovery),
    ("mlp_gradients", mlp_gradients),
    ("y0_sampler_insensitivity", y0_sampler_insensitivity),
];

/// First run of each criterion, shared with the determinism check.
fn first_run(i: usize) -> &'static Outcome {
    static CELLS: [OnceLock<Outcome>; 10] = [const { OnceLock::new() }; 10];
    CELLS[i].get_or_init(CRITERIA[i].1)
}

fn check(i: usize) {
    let o = first_run(i);
    report(CRITERIA[i].0, o);
    assert!(o.pass, "{}: {}", CRITERIA[i].0, o.detail);
}

#[test]
fn gradient_unbiasedness_criterion() {
    check(0);
}

#[test]
fn loss_oracle_criterion() {
    check(1);
}

#[test]
fn loss_bounds_criterion() {
    check(2);
}

#[test]
fn sgd_rate_criterion() {
    check(3);
}

#[test]
fn slope_sweep_criterion() {
    check(4);
}

#[test]
fn nuisance_noise_criterion() {
    check(5);
}

#[test]
fn sample_size_monotone_criterion() {
    check(6);
}

#[test]
fn baseline_recovery_criterion() {
    check(7);
}

#[test]
fn mlp_gradients_criterion() {
    check(8);
}

#[test]
fn y0_sampler_insensitivity_criterion() {
    check(9);
}

#[test]
fn determinism_criterion() {
    let mut differing = Vec::new();
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        let again = f();
        if again.csv != first_run(i).csv {
            differing.push(*name);
        }
    }
    let o = Outcome {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            "all ten result CSVs identical on rerun".into()
        } else {
            format!("differing: {}", differing.join(", "))
        },
        csv: String::new(),
    };
    report("determinism", &o);
    assert!(o.pass, "{}", o.detail);
}
