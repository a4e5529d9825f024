//! Metric suite: progress alignment (Pearson against the t/T ramp), MAE,
//! stop reliability, steps-to-termination, success rate, and curve emission.

use std::path::Path;

use thiserror::Error;

/// Terminal window length for the stop-reliability predicate.
pub const STOP_WINDOW: usize = 10;
/// Progress threshold for the stop-reliability predicate.
pub const STOP_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("variance is degenerate (constant sequence)")]
    DegenerateVariance,
    #[error("empty input")]
    EmptyInput,
    #[error("trajectory too short: {got} < {need}")]
    TooShort { got: usize, need: usize },
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("parse failure at line {0}")]
    ParseFailure(usize),
}

/// Sample Pearson correlation. Errors on constant inputs.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(EvalError::EmptyInput);
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(EvalError::DegenerateVariance);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Mean absolute error over aligned slices.
pub fn mae(predicted: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(EvalError::EmptyInput);
    }
    Ok(predicted.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum::<f64>()
        / predicted.len() as f64)
}

/// The reference ramp p_t = t/T over a trajectory of `len` samples.
pub fn reference_ramp(len: usize) -> Vec<f64> {
    if len <= 1 {
        return vec![0.0; len];
    }
    let t = (len - 1) as f64;
    (0..len).map(|i| i as f64 / t).collect()
}

/// Fraction of trajectories whose predicted progress exceeds `threshold`
/// somewhere in the final `window` steps. Returns (fraction, excluded count);
/// trajectories shorter than the window are excluded.
pub fn stop_reliability(
    trajectories: &[Vec<f64>],
    window: usize,
    threshold: f64,
) -> Result<(f64, usize), EvalError> {
    if trajectories.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut hits = 0usize;
    let mut included = 0usize;
    let mut excluded = 0usize;
    for t in trajectories {
        if t.len() < window {
            excluded += 1;
            continue;
        }
        included += 1;
        let tail = &t[t.len() - window..];
        if tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > threshold {
            hits += 1;
        }
    }
    if included == 0 {
        return Err(EvalError::TooShort { got: 0, need: window });
    }
    Ok((hits as f64 / included as f64, excluded))
}

/// One evaluated episode: per-step predicted progress (including the initial
/// state), ground-truth oracle progress, executed chunk count, success flag.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub progress: Vec<f64>,
    pub oracle: Vec<f64>,
    pub chunks: usize,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pearson_r: f64,
    pub mae: f64,
    pub stop_reliability: f64,
    pub avg_steps: f64,
    pub success_rate: f64,
    pub episodes: usize,
    pub pearson_excluded: usize,
    pub stop_excluded: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    /// Flat key=value serialization (also the byte-level determinism unit).
    pub fn to_kv_text(&self) -> String {
        format!(
            "pearson_r={}\nmae={}\nstop_reliability={}\navg_steps={}\nsuccess_rate={}\n\
             episodes={}\npearson_excluded={}\nstop_excluded={}\nconfig_fingerprint={}\n",
            self.pearson_r,
            self.mae,
            self.stop_reliability,
            self.avg_steps,
            self.success_rate,
            self.episodes,
            self.pearson_excluded,
            self.stop_excluded,
            self.config_fingerprint
        )
    }

    pub fn table_header() -> &'static str {
        "config\tepisodes\tpearson_r\tmae\tstop\tavg_steps\tsuccess"
    }

    /// One delimited row for sweep concatenation.
    pub fn to_table_row(&self) -> String {
        format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\t{:.4}",
            self.config_fingerprint,
            self.episodes,
            self.pearson_r,
            self.mae,
            self.stop_reliability,
            self.avg_steps,
            self.success_rate
        )
    }
}

/// Aggregate a rollout set. Per-episode Pearson/MAE are computed against the
/// t/T reference ramp and averaged; degenerate episodes are excluded with a
/// count rather than scored as zero.
pub fn rollout_metrics(
    rollouts: &[RolloutRecord],
    window: usize,
    threshold: f64,
    fingerprint: &str,
) -> Result<EvalReport, EvalError> {
    if rollouts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut pearsons = Vec::new();
    let mut pearson_excluded = 0usize;
    let mut maes = Vec::new();
    for r in rollouts {
        let ramp = reference_ramp(r.progress.len());
        match pearson_r(&r.progress, &ramp) {
            Ok(v) => pearsons.push(v),
            Err(_) => pearson_excluded += 1,
        }
        if let Ok(m) = mae(&r.progress, &ramp) {
            maes.push(m);
        }
    }
    let traces: Vec<Vec<f64>> = rollouts.iter().map(|r| r.progress.clone()).collect();
    let (stop, stop_excluded) = stop_reliability(&traces, window, threshold)?;
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(EvalReport {
        pearson_r: avg(&pearsons),
        mae: avg(&maes),
        stop_reliability: stop,
        avg_steps: rollouts.iter().map(|r| r.chunks as f64).sum::<f64>() / rollouts.len() as f64,
        success_rate: rollouts.iter().filter(|r| r.success).count() as f64 / rollouts.len() as f64,
        episodes: rollouts.len(),
        pearson_excluded,
        stop_excluded,
        config_fingerprint: fingerprint.to_string(),
    })
}

/// Guided-vs-unguided comparison block: absolute values plus deltas.
pub fn comparison_text(guided: &EvalReport, unguided: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(EvalReport::table_header());
    s.push('\n');
    s.push_str(&unguided.to_table_row());
    s.push('\n');
    s.push_str(&guided.to_table_row());
    s.push('\n');
    s.push_str(&format!(
        "delta\t-\t{:+.4}\t{:+.4}\t{:+.4}\t{:+.2}\t{:+.4}\n",
        guided.pearson_r - unguided.pearson_r,
        guided.mae - unguided.mae,
        guided.stop_reliability - unguided.stop_reliability,
        guided.avg_steps - unguided.avg_steps,
        guided.success_rate - unguided.success_rate
    ));
    s
}

/// Write per-step traces as `episode step p_hat oracle` lines for plotting.
pub fn emit_curves(
    rollouts: &[RolloutRecord],
    header: &[(String, String)],
    path: &Path,
) -> Result<(), EvalError> {
    use std::io::Write;
    if rollouts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in header {
        writeln!(f, "# {k}={v}")?;
    }
    for (ep, r) in rollouts.iter().enumerate() {
        for (step, (p, o)) in r.progress.iter().zip(&r.oracle).enumerate() {
            writeln!(f, "{ep} {step} {p} {o}")?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Parse curves back into (episode, step, p̂, oracle) tuples.
pub fn parse_curves(path: &Path) -> Result<Vec<(usize, usize, f64, f64)>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse_err = || EvalError::ParseFailure(i + 1);
        let ep = it.next().and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
        let step = it.next().and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
        let p = it.next().and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
        let o = it.next().and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
        out.push((ep, step, p, o));
    }
    Ok(out)
}

/// Minimal SVG polyline chart of per-episode progress traces.
pub fn render_svg_chart(rollouts: &[RolloutRecord], path: &Path) -> Result<(), EvalError> {
    use std::io::Write;
    if rollouts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (w, h, pad) = (640.0, 360.0, 30.0);
    let max_len = rollouts.iter().map(|r| r.progress.len()).max().unwrap().max(2);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - pad, w - pad, h - pad, h - pad
    ));
    for (i, r) in rollouts.iter().enumerate() {
        let hue = (i * 47) % 360;
        let pts: Vec<String> = r
            .progress
            .iter()
            .enumerate()
            .map(|(t, p)| {
                let x = pad + (w - 2.0 * pad) * t as f64 / (max_len - 1) as f64;
                let y = h - pad - (h - 2.0 * pad) * p.clamp(0.0, 1.0);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"hsl({hue},70%,45%)\" stroke-width=\"1\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }
    svg.push_str("</svg>\n");
    let mut f = std::fs::File::create(path)?;
    f.write_all(svg.as_bytes())?;
    Ok(())
}
