use serde_json::json;

use nsbayes::dns::{fit_dns_params, predict_yield, profile_lambda, two_step_estimate};
use nsbayes::hmc::ChainStats;
use nsbayes::map::{fit_rmse, rolling_map};
use nsbayes::optim::BfgsOptions;
use nsbayes::pricing::{histogram, price_monte_carlo};
use nsbayes::{
    diagnostics, fit_map, filter as dns_filter, sample as hmc_sample, summarize, BondSpec,
    Compounding, DnsParams, DnsState, Error, GpKernel, HmcConfig, MapOptions, MapResult, PosteriorDraws,
    PriorModel, YieldPanel,
};

use crate::output::{csv_body, load_panel, num, opt, read_file, table, CliResult, Outputs};
use crate::{CommonArgs, CompoundingArg, FilterArgs, FitArgs, Format, PriceArgs, SampleArgs, SamplerArgs};

/// Curve points written per fitted model: monthly out to 30 years.
const CURVE_MONTHS: usize = 360;
/// Fewer draws than this make the price band unreliable.
const MIN_PRICE_DRAWS: usize = 100;

fn emit(common: &CommonArgs, header: &[&str], rows: &[Vec<String>], json: serde_json::Value) {
    match common.format {
        Format::Table => print!("{}", table(header, rows)),
        Format::Csv => print!("{}", csv_body(header, rows)),
        Format::Json => println!("{}", serde_json::to_string_pretty(&json).unwrap_or_default()),
    }
}

fn hmc_config(sampler: &SamplerArgs, seed: u64) -> HmcConfig {
    HmcConfig {
        chains: sampler.chains,
        warmup: sampler.warmup,
        draws: sampler.draws,
        target_accept: sampler.target_accept,
        max_leapfrog: sampler.max_leapfrog,
        seed,
        ..HmcConfig::default()
    }
}

fn map_row(r: &MapResult, panel: &YieldPanel) -> Vec<String> {
    let p = &r.params;
    let flag = if p.beta0 < p.beta2 { "undesirable ordering" } else { "" };
    vec![
        r.model.tag().to_string(),
        num(p.beta0),
        num(p.beta1),
        num(p.beta2),
        num(p.lambda),
        num(p.sigma),
        opt(p.sigma_beta),
        num(r.log_post),
        num(fit_rmse(panel, p)),
        r.converged.to_string(),
        flag.to_string(),
    ]
}

const MAP_HEADER: [&str; 11] = [
    "model", "beta0", "beta1", "beta2", "lambda", "sigma", "sigma_beta", "log_post", "rmse", "converged", "flag",
];

pub fn fit(args: &FitArgs) -> CliResult<()> {
    let panel = load_panel(&args.common)?;
    let options = MapOptions {
        max_iters: args.max_iters,
        restarts: args.restarts,
        seed: args.common.seed,
        ..MapOptions::default()
    };
    let models: Vec<PriorModel> = args.model.iter().map(|&m| m.into()).collect();
    let tags: Vec<&str> = models.iter().map(|m| m.tag()).collect();
    let mut out = Outputs::new(&args.common.out_dir, "fit", args.common.seed, &tags.join(","));

    let mut results = Vec::new();
    let mut deferred: Option<Error> = None;
    for &model in &models {
        match fit_map(model, &panel, None, &options) {
            Ok(r) => results.push(r),
            Err(Error::Convergence { message, best_effort: Some(best) }) => {
                eprintln!("warning: {model}: {message}");
                results.push((*best).clone());
                deferred.get_or_insert(Error::Convergence { message, best_effort: Some(best) });
            }
            Err(e) => return Err(e.into()),
        }
    }

    let rows: Vec<Vec<String>> = results.iter().map(|r| map_row(r, &panel)).collect();
    for r in &results {
        if r.params.beta0 < r.params.beta2 {
            eprintln!("note: {}: beta0 < beta2, undesirable ordering", r.model);
        }
    }
    out.add("fit_map.csv", csv_body(&MAP_HEADER, &rows));

    let mut curve = Vec::with_capacity(results.len() * CURVE_MONTHS);
    for r in &results {
        for k in 1..=CURVE_MONTHS {
            let tau = k as f64 / 12.0;
            curve.push(vec![r.model.tag().to_string(), num(tau), num(r.params.yield_at(tau))]);
        }
    }
    out.add("fit_curve.csv", csv_body(&["model", "tau", "yield"], &curve));

    if args.rolling {
        let mut rolling = Vec::new();
        for &model in &models {
            for (i, fit) in rolling_map(&panel, model, &options).into_iter().enumerate() {
                let date = fit.date.to_string();
                let row = match &fit.result {
                    Ok(r) => {
                        let mut row = vec![date];
                        row.extend(map_row(r, &panel.single_date(i)));
                        row.push(String::new());
                        row
                    }
                    Err(e) => {
                        let mut row = vec![date, model.tag().to_string()];
                        row.extend(std::iter::repeat_n("NA".to_string(), MAP_HEADER.len() - 3));
                        row.push("false".to_string());
                        row.push(String::new());
                        row.push(e.to_string().replace(',', ";"));
                        row
                    }
                };
                rolling.push(row);
            }
        }
        let mut header = vec!["date"];
        header.extend(MAP_HEADER);
        header.push("error");
        out.add("fit_rolling.csv", csv_body(&header, &rolling));
    }

    out.commit()?;
    emit(&args.common, &MAP_HEADER, &rows, json!(results
        .iter()
        .map(|r| json!({
            "model": r.model.tag(),
            "params": r.params,
            "log_post": r.log_post,
            "rmse": fit_rmse(&panel, &r.params),
            "converged": r.converged,
            "undesirable_ordering": r.params.beta0 < r.params.beta2,
        }))
        .collect::<Vec<_>>()));
    match deferred {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn draws_csv(draws: &PosteriorDraws) -> CliResult<String> {
    let mut buf = Vec::new();
    draws.write_csv(&mut buf)?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

fn chains_csv(stats: &[ChainStats]) -> String {
    let rows: Vec<Vec<String>> = stats
        .iter()
        .enumerate()
        .map(|(c, s)| {
            vec![
                c.to_string(),
                num(s.step_size),
                num(s.accept_rate),
                s.divergences.to_string(),
                num(s.mean_leapfrog),
                s.max_leapfrog.to_string(),
                s.inv_mass.iter().map(|v| num(*v)).collect::<Vec<_>>().join(" "),
            ]
        })
        .collect();
    csv_body(
        &["chain", "step_size", "accept_rate", "divergences", "mean_leapfrog", "max_leapfrog", "inv_mass"],
        &rows,
    )
}

/// Posterior summary, diagnostics, per-chain statistics and raw draws.
fn add_sample_files(out: &mut Outputs, draws: &PosteriorDraws) -> CliResult<(Vec<Vec<String>>, serde_json::Value)> {
    let summary = summarize(draws);
    let diag = diagnostics(draws);
    let rows: Vec<Vec<String>> = summary
        .params
        .iter()
        .map(|p| vec![p.name.clone(), num(p.mean), num(p.sd), num(p.q025), num(p.median), num(p.q975)])
        .collect();
    out.add(
        "posterior_summary.csv",
        csv_body(&["parameter", "mean", "sd", "q2.5", "median", "q97.5"], &rows),
    );
    let diag_rows: Vec<Vec<String>> = diag
        .params
        .iter()
        .map(|d| vec![d.name.clone(), opt(d.rhat), num(d.ess_bulk)])
        .collect();
    out.add("diagnostics.csv", csv_body(&["parameter", "rhat", "ess_bulk"], &diag_rows));
    out.add("chains.csv", chains_csv(&draws.chain_stats));
    out.add("draws.csv", draws_csv(draws)?);
    Ok((rows, json!({ "summary": summary, "diagnostics": diag })))
}

const SUMMARY_HEADER: [&str; 6] = ["parameter", "mean", "sd", "q2.5", "median", "q97.5"];

pub fn sample(args: &SampleArgs) -> CliResult<()> {
    let panel = load_panel(&args.common)?;
    let model: PriorModel = args.model.into();
    let config = hmc_config(&args.sampler, args.common.seed);
    let mut out = Outputs::new(&args.common.out_dir, "sample", args.common.seed, model.tag());
    let (draws, failure) = match hmc_sample(model, &panel, &config) {
        Ok(d) => (d, None),
        Err(Error::SamplingQuality { message, draws, diagnostics }) => {
            let d = (*draws).clone();
            (d, Some(Error::SamplingQuality { message, draws, diagnostics }))
        }
        Err(e) => return Err(e.into()),
    };
    let (rows, json) = add_sample_files(&mut out, &draws)?;
    out.commit()?;
    emit(&args.common, &SUMMARY_HEADER, &rows, json);
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// Random-walk factors with moderate noise; used when the data are too
/// short for the two-step estimate.
fn random_walk(lambda: f64) -> DnsParams {
    DnsParams::new([0.0; 3], [1.0; 3], 0.01, 0.01, lambda)
}

fn start_params(panel: &YieldPanel, lambda: f64) -> DnsParams {
    two_step_estimate(panel, lambda).unwrap_or_else(|_| random_walk(lambda))
}

pub fn filter(args: &FilterArgs) -> CliResult<()> {
    let panel = load_panel(&args.common)?;
    if panel.n_dates() < 2 {
        return Err(Error::Validation(format!(
            "the filter needs at least 2 dates, the panel has {}",
            panel.n_dates()
        ))
        .into());
    }
    if args.lambda_grid.is_empty() {
        return Err(Error::Validation("lambda grid is empty".into()).into());
    }
    let kernel = match args.gp_amplitude {
        None | Some(0.0) => GpKernel::None,
        Some(a) => GpKernel::SquaredExponential {
            amplitude2: a,
            length_scale: args.gp_length,
        },
    };
    kernel.validate()?;
    let init = DnsState::diffuse(&panel)?;

    let (lambda_star, scores) =
        profile_lambda(&panel, &args.lambda_grid, &init, &kernel, |p, l| Ok(start_params(p, l)))?;

    let mut params = start_params(&panel, lambda_star);
    let mut mle_converged = None;
    if args.mle_iters > 0 {
        let options = BfgsOptions {
            max_iters: args.mle_iters,
            grad_tol: 1e-6,
            ..BfgsOptions::default()
        };
        match fit_dns_params(&panel, &params, &init, &kernel, &options) {
            Ok(fit) => {
                mle_converged = Some(fit.converged);
                params = fit.params;
            }
            Err(e) => eprintln!("warning: likelihood refinement failed, keeping the two-step estimate: {e}"),
        }
    }
    let run = dns_filter(&params, &panel, &init, &kernel)?;

    let model_tag = format!("dns-lambda={lambda_star}");
    let mut out = Outputs::new(&args.common.out_dir, "filter", args.common.seed, &model_tag);

    let score_rows: Vec<Vec<String>> = scores
        .iter()
        .map(|s| vec![num(s.lambda), opt(s.log_likelihood), (s.lambda == lambda_star).to_string()])
        .collect();
    out.add(
        "dns_lambda_scores.csv",
        csv_body(&["lambda", "log_likelihood", "selected"], &score_rows),
    );

    let mut state_rows = Vec::with_capacity(panel.n_dates());
    for (t, date) in panel.dates().iter().enumerate() {
        let (p, f) = (&run.predicted[t], &run.filtered[t]);
        let (psd, fsd) = (p.sd(), f.sd());
        let mut row = vec![date.to_string()];
        row.extend((0..3).map(|k| num(p.beta_hat[k])));
        row.extend((0..3).map(|k| num(psd[k])));
        row.extend((0..3).map(|k| num(f.beta_hat[k])));
        row.extend((0..3).map(|k| num(fsd[k])));
        state_rows.push(row);
    }
    out.add(
        "dns_states.csv",
        csv_body(
            &[
                "date", "pred_beta0", "pred_beta1", "pred_beta2", "pred_sd0", "pred_sd1", "pred_sd2", "beta0",
                "beta1", "beta2", "sd0", "sd1", "sd2",
            ],
            &state_rows,
        ),
    );

    let taus = panel.grid().taus();
    let mut innov_rows = Vec::new();
    for (t, date) in panel.dates().iter().enumerate() {
        for (j, tau) in taus.iter().enumerate() {
            innov_rows.push(vec![
                date.to_string(),
                num(*tau),
                opt(run.innovations[t][j]),
                opt(run.innovation_vars[t][j]),
            ]);
        }
    }
    out.add(
        "dns_innovations.csv",
        csv_body(&["date", "tau", "innovation", "variance"], &innov_rows),
    );

    let mut curve_rows = Vec::new();
    for (t, date) in panel.dates().iter().enumerate() {
        for k in 1..=120 {
            let tau = k as f64 * 0.25;
            let (mean, var) = predict_yield(&run.filtered[t], lambda_star, tau, params.sigma_eps2)?;
            curve_rows.push(vec![date.to_string(), num(tau), num(mean), num(var.sqrt())]);
        }
    }
    out.add(
        "dns_predicted_curves.csv",
        csv_body(&["date", "tau", "mean", "sd"], &curve_rows),
    );

    let summary_rows = vec![
        vec!["lambda".into(), num(lambda_star)],
        vec!["log_likelihood".into(), num(run.log_likelihood)],
        vec!["theta0_0".into(), num(params.theta0[0])],
        vec!["theta0_1".into(), num(params.theta0[1])],
        vec!["theta0_2".into(), num(params.theta0[2])],
        vec!["z_0".into(), num(params.z[0])],
        vec!["z_1".into(), num(params.z[1])],
        vec!["z_2".into(), num(params.z[2])],
        vec!["sigma_eps2".into(), num(params.sigma_eps2)],
        vec!["sigma_eta2".into(), num(params.sigma_eta2)],
        vec![
            "mle_converged".into(),
            mle_converged.map_or_else(|| "NA".to_string(), |c| c.to_string()),
        ],
    ];
    out.add("dns_summary.csv", csv_body(&["quantity", "value"], &summary_rows));
    out.commit()?;

    emit(
        &args.common,
        &["quantity", "value"],
        &summary_rows,
        json!({
            "lambda": lambda_star,
            "log_likelihood": run.log_likelihood,
            "scores": scores,
            "theta0": [params.theta0[0], params.theta0[1], params.theta0[2]],
            "z": [params.z[0], params.z[1], params.z[2]],
            "sigma_eps2": params.sigma_eps2,
            "sigma_eta2": params.sigma_eta2,
            "mle_converged": mle_converged,
        }),
    );
    Ok(())
}

fn correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn price(args: &PriceArgs) -> CliResult<()> {
    let compounding = match args.compounding {
        CompoundingArg::Continuous => Compounding::Continuous,
        CompoundingArg::PerPeriod => Compounding::PerPeriod,
    };
    let bond = BondSpec::new(args.par, args.coupon, args.freq, args.maturity).with_compounding(compounding);
    bond.validate()?;
    let model: PriorModel = args.model.into();

    let draws = match &args.draws_file {
        Some(path) => PosteriorDraws::read_csv(read_file(path)?.as_slice())?,
        None => {
            let panel = load_panel(&args.common)?;
            hmc_sample(model, &panel, &hmc_config(&args.sampler, args.common.seed))?
        }
    };
    if draws.len() < MIN_PRICE_DRAWS {
        eprintln!(
            "warning: only {} posterior draws; the credible band is unreliable below {MIN_PRICE_DRAWS}",
            draws.len()
        );
    }
    let mc = price_monte_carlo(&draws, &bond)?;
    let s = mc.summary;
    let verdict = args.traded.map(|t| nsbayes::valuation_verdict(&s, t));

    let tag = if args.draws_file.is_some() { "file" } else { model.tag() };
    let mut out = Outputs::new(&args.common.out_dir, "price", args.common.seed, tag);

    let summary_header = ["mean", "median", "ci_low", "ci_high", "sd", "draws_used", "traded", "verdict"];
    let summary_row = vec![
        num(s.mean),
        num(s.median),
        num(s.ci_low),
        num(s.ci_high),
        num(s.sd),
        s.draws_used.to_string(),
        opt(verdict.map(|v| v.traded)),
        verdict.map_or_else(|| "NA".to_string(), |v| v.verdict.to_string()),
    ];
    out.add("price_summary.csv", csv_body(&summary_header, std::slice::from_ref(&summary_row)));

    let curve_names = ["beta0", "beta1", "beta2", "lambda"];
    let cols: Vec<Option<Vec<f64>>> = curve_names
        .iter()
        .map(|n| draws.param_index(n).map(|k| draws.column(k)))
        .collect();
    let chain_of = draws.chain_of_rows();
    let draw_rows: Vec<Vec<String>> = mc
        .prices
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut row = vec![i.to_string(), chain_of[i].to_string(), num(*p)];
            row.extend(cols.iter().map(|c| opt(c.as_ref().map(|c| c[i]))));
            row
        })
        .collect();
    let mut draw_header = vec!["draw", "chain", "price"];
    draw_header.extend(curve_names);
    out.add("price_draws.csv", csv_body(&draw_header, &draw_rows));

    let hist_rows: Vec<Vec<String>> = histogram(&mc.prices, args.bins)
        .iter()
        .map(|b| vec![num(b.lo), num(b.hi), b.count.to_string()])
        .collect();
    out.add("price_histogram.csv", csv_body(&["lo", "hi", "count"], &hist_rows));

    let corr: Vec<(String, Option<f64>)> = curve_names
        .iter()
        .zip(&cols)
        .map(|(n, c)| (n.to_string(), c.as_ref().and_then(|c| correlation(&mc.prices, c))))
        .collect();
    let corr_rows: Vec<Vec<String>> = corr.iter().map(|(n, c)| vec![n.clone(), opt(*c)]).collect();
    out.add("price_correlations.csv", csv_body(&["parameter", "corr_with_price"], &corr_rows));
    out.commit()?;

    emit(
        &args.common,
        &summary_header,
        &[summary_row],
        json!({
            "summary": s,
            "verdict": verdict,
            "correlations": corr.iter().map(|(n, c)| json!({"parameter": n, "corr": c})).collect::<Vec<_>>(),
        }),
    );
    Ok(())
}
