//! Strict `key = value` run configuration.
//!
//! Keys carry a section prefix (`pipeline.`, `taper.`, `process.`, `sweep.`).
//! Unknown keys, repeated keys and unparsable values are errors that name
//! the offending key.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::signal::{Preset, ProcessSpec};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("pipeline.final_order", "2", "order p of the final (0,p) kernels"),
    ("pipeline.stages", "two_stage", "two_stage | three_stage"),
    ("pipeline.init", "scalelength", "scalelength | rice_factor | parametric (rejected)"),
    ("pipeline.tau", "200", "prior time scale tau, samples"),
    ("pipeline.lambda_f", "0.05", "prior frequency scalelength lambda_F, cycles/sample"),
    ("pipeline.theta_scale", "1", "prior log-spectrum scale for the scalelength ansatz"),
    ("pipeline.smoothness_order", "8", "declared continuous derivatives; final_order may not exceed it"),
    ("pipeline.reg_b", "0.1", "regularization constant b in (0,1]"),
    ("pipeline.kernel_shape", "minimal_norm", "minimal_norm | biweight_damped"),
    ("pipeline.covariance", "diagonal", "diagonal | windowed"),
    ("pipeline.freq_boundary", "reflect", "reflect | truncate"),
    ("pipeline.rice_points", "12", "points per axis of the logarithmic Rice grid"),
    ("pipeline.rice_grid", "", "explicit Rice grid `h_t:h_f,h_t:h_f,...`"),
    ("pipeline.h_min", "0.001", "smallest normalized halfwidth"),
    ("taper.family", "sine", "uniform | sine"),
    ("taper.length", "", "odd taper length; chosen from the priors when unset"),
    ("taper.p_t", "0.5", "time overlap: column spacing is p_t*N samples"),
    ("taper.p_f", "0.5", "frequency overlap: row spacing is p_f/N"),
    ("process.preset", "stationary-white", "stationary-white | am | chirp | burst"),
    ("process.n_samples", "4096", "series length"),
    ("process.n_freq_bins", "", "synthesis bins (even); 2*n_samples when unset"),
    ("process.seed", "1", "random seed"),
    ("process.smoothness_order", "8", "declared smoothness of the process"),
    ("process.level", "1", "stationary-white: spectral level"),
    ("process.g_amplitude", "0.5", "am: modulation depth in [0,1)"),
    ("process.period", "", "am, chirp: modulation period, samples"),
    ("process.tau", "200", "chirp: time scale (period = 2*pi*tau); burst: time width"),
    ("process.lambda_f", "0.05", "chirp: bump width and sweep; burst: spectral width"),
    ("process.floor", "1", "chirp: spectral floor"),
    ("process.peak", "9", "chirp, burst: bump height"),
    ("process.center", "0.25", "chirp: mean bump frequency; burst: f0"),
    ("process.sweep", "", "chirp: drift amplitude (defaults to lambda_f)"),
    ("process.t0", "", "burst: time of the burst (defaults to n_samples/2)"),
    ("sweep.scales", "25,50,100,200", "values of tau*lambda_F"),
    ("sweep.realizations", "20", "realizations per scale"),
    ("sweep.preset", "chirp", "chirp | burst | am"),
    ("sweep.lambda_f", "0.05", "lambda_F held fixed while tau varies"),
    ("sweep.periods", "1", "series length in units of 2*pi*tau"),
    ("sweep.seed", "1", "seed of the first realization"),
];

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Raw key/value pairs with strict key checking.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| config_err(t, format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(name, _, _)| *name == k) {
                return Err(config_err(k, format!("line {}: unknown key", i + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(config_err(k, format!("line {}: repeated key", i + 1)));
            }
        }
        Ok(RawConfig { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| config_err(key, format!("bad value `{v}`: {e}"))))
            .transpose()
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|x| x.trim().parse::<f64>().map_err(|e| config_err(key, format!("bad entry `{x}`: {e}"))))
                    .collect()
            })
            .transpose()
    }

    fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.values.keys().filter(move |k| k.starts_with(prefix)).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessConfig {
    pub preset: Preset,
    pub n_samples: usize,
    pub n_freq_bins: usize,
    pub seed: u64,
    pub smoothness_order: usize,
    /// Scales used where the preset has none (e.g. stationary white noise).
    pub fallback_scales: (f64, f64),
}

impl ProcessConfig {
    pub fn spec(&self) -> Result<ProcessSpec> {
        Ok(ProcessSpec::from_preset(self.preset.clone(), self.fallback_scales)?.with_smoothness_order(self.smoothness_order))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub scales: Vec<f64>,
    pub realizations: usize,
    pub preset: String,
    pub lambda_f: f64,
    pub periods: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            scales: vec![25.0, 50.0, 100.0, 200.0],
            realizations: 20,
            preset: "chirp".to_string(),
            lambda_f: 0.05,
            periods: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub process: ProcessConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&RawConfig::parse(text)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let pipeline = pipeline_config(raw)?;
        let process = process_config(raw)?;
        let sweep = sweep_config(raw)?;
        Ok(RunConfig {
            pipeline,
            process,
            sweep,
        })
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("defaults are valid")
    }
}

fn pipeline_config(raw: &RawConfig) -> Result<PipelineConfig> {
    let mut c = PipelineConfig::default();
    macro_rules! set {
        ($field:ident, $key:literal) => {
            if let Some(v) = raw.value($key)? {
                c.$field = v;
            }
        };
    }
    set!(final_order, "pipeline.final_order");
    set!(stages, "pipeline.stages");
    set!(init, "pipeline.init");
    set!(tau_prior, "pipeline.tau");
    set!(lambda_f_prior, "pipeline.lambda_f");
    set!(theta_scale_prior, "pipeline.theta_scale");
    set!(smoothness_order, "pipeline.smoothness_order");
    set!(reg_b, "pipeline.reg_b");
    set!(kernel_shape, "pipeline.kernel_shape");
    set!(covariance, "pipeline.covariance");
    set!(freq_boundary, "pipeline.freq_boundary");
    set!(rice_points, "pipeline.rice_points");
    set!(h_min, "pipeline.h_min");
    set!(taper_family, "taper.family");
    set!(p_t, "taper.p_t");
    set!(p_f, "taper.p_f");
    c.taper_length = raw.value("taper.length")?;
    if let Some(g) = raw.get("pipeline.rice_grid") {
        let key = "pipeline.rice_grid";
        let pairs = g
            .split(',')
            .map(|pair| {
                let (a, b) = pair
                    .split_once(':')
                    .ok_or_else(|| config_err(key, format!("entry `{pair}` is not `h_t:h_f`")))?;
                let parse = |x: &str| x.trim().parse::<f64>().map_err(|e| config_err(key, format!("bad entry `{x}`: {e}")));
                Ok((parse(a)?, parse(b)?))
            })
            .collect::<Result<Vec<_>>>()?;
        c.rice_grid = Some(pairs);
    }
    for (name, ok) in [
        ("taper.p_t", c.p_t > 0.0 && c.p_t.is_finite()),
        ("taper.p_f", c.p_f > 0.0 && c.p_f.is_finite()),
    ] {
        if !ok {
            return Err(config_err(name, "must be positive"));
        }
    }
    c.validate().map_err(|e| match e {
        Error::InvalidArgument { name, reason } => config_err(&format!("pipeline.{name}"), reason),
        other => other,
    })?;
    Ok(c)
}

fn process_config(raw: &RawConfig) -> Result<ProcessConfig> {
    let name = raw.get("process.preset").unwrap_or("stationary-white");
    let n_samples: usize = raw.value("process.n_samples")?.unwrap_or(4096);
    if n_samples == 0 {
        return Err(config_err("process.n_samples", "must be at least 1"));
    }
    let n_freq_bins: usize = raw.value("process.n_freq_bins")?.unwrap_or(2 * n_samples);
    if n_freq_bins < 2 || n_freq_bins % 2 == 1 {
        return Err(config_err("process.n_freq_bins", "must be even and at least 2"));
    }
    let allowed: &[&str] = match name {
        "stationary-white" => &["level"],
        "am" => &["g_amplitude", "period"],
        "chirp" => &["tau", "lambda_f", "floor", "peak", "center", "sweep", "period"],
        "burst" => &["tau", "lambda_f", "peak", "center", "t0"],
        other => return Err(config_err("process.preset", format!("unknown preset `{other}`"))),
    };
    let common = ["preset", "n_samples", "n_freq_bins", "seed", "smoothness_order"];
    for key in raw.keys_with_prefix("process.") {
        let short = &key["process.".len()..];
        if !common.contains(&short) && !allowed.contains(&short) {
            return Err(config_err(key, format!("not a parameter of preset `{name}`")));
        }
    }
    let f = |key: &str, default: f64| -> Result<f64> { Ok(raw.value(key)?.unwrap_or(default)) };
    let tau = f("process.tau", 200.0)?;
    let lambda_f = f("process.lambda_f", 0.05)?;
    let preset = match name {
        "stationary-white" => Preset::StationaryWhite {
            level: f("process.level", 1.0)?,
        },
        "am" => Preset::am(f("process.g_amplitude", 0.5)?, f("process.period", 1000.0)?),
        "chirp" => {
            let Preset::Chirp {
                floor,
                peak,
                center,
                sweep,
                period,
                width,
            } = Preset::chirp(tau, lambda_f)
            else {
                unreachable!()
            };
            Preset::Chirp {
                floor: f("process.floor", floor)?,
                peak: f("process.peak", peak)?,
                center: f("process.center", center)?,
                sweep: f("process.sweep", sweep)?,
                period: f("process.period", period)?,
                width,
            }
        }
        _ => Preset::Burst {
            peak: f("process.peak", 9.0)?,
            t0: f("process.t0", n_samples as f64 / 2.0)?,
            time_width: tau,
            f0: f("process.center", 0.25)?,
            width: lambda_f,
        },
    };
    let cfg = ProcessConfig {
        preset,
        n_samples,
        n_freq_bins,
        seed: raw.value("process.seed")?.unwrap_or(1),
        smoothness_order: raw.value("process.smoothness_order")?.unwrap_or(8),
        fallback_scales: (tau, lambda_f),
    };
    cfg.spec()
        .map_err(|e| config_err("process.preset", format!("{name}: {e}")))?;
    Ok(cfg)
}

fn sweep_config(raw: &RawConfig) -> Result<SweepConfig> {
    let mut c = SweepConfig::default();
    if let Some(s) = raw.list("sweep.scales")? {
        c.scales = s;
    }
    if c.scales.is_empty() || c.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(config_err("sweep.scales", "need positive finite scales"));
    }
    c.realizations = raw.value("sweep.realizations")?.unwrap_or(c.realizations);
    if c.realizations == 0 {
        return Err(config_err("sweep.realizations", "must be at least 1"));
    }
    if let Some(p) = raw.get("sweep.preset") {
        if !["chirp", "burst", "am"].contains(&p) {
            return Err(config_err("sweep.preset", format!("unknown preset `{p}`")));
        }
        c.preset = p.to_string();
    }
    c.lambda_f = raw.value("sweep.lambda_f")?.unwrap_or(c.lambda_f);
    c.periods = raw.value("sweep.periods")?.unwrap_or(c.periods);
    c.seed = raw.value("sweep.seed")?.unwrap_or(c.seed);
    if !(c.lambda_f > 0.0 && c.lambda_f < 0.5) {
        return Err(config_err("sweep.lambda_f", "must lie in (0, 0.5)"));
    }
    if !(c.periods > 0.0) {
        return Err(config_err("sweep.periods", "must be positive"));
    }
    Ok(c)
}

/// Help text listing every key with its default.
pub fn describe_keys() -> String {
    let width = KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    KEYS.iter()
        .map(|(k, d, desc)| {
            let d = if d.is_empty() { "-" } else { d };
            format!("  {k:width$}  [{d}]  {desc}\n")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{Init, Stages};

    #[test]
    fn defaults_match_documentation() {
        let c = RunConfig::default();
        let d = PipelineConfig::default();
        assert_eq!(c.pipeline, d);
        for (k, v, _) in KEYS {
            if v.is_empty() || k.starts_with("process.") {
                continue;
            }
            let text = format!("{k} = {v}\n");
            let parsed = RunConfig::parse(&text).unwrap_or_else(|e| panic!("{k}: {e}"));
            assert_eq!(parsed, c, "{k}");
        }
    }

    #[test]
    fn unknown_key_named() {
        let e = RunConfig::parse("pipeline.finalorder = 2").unwrap_err();
        assert!(e.to_string().contains("pipeline.finalorder"), "{e}");
        assert!(matches!(e, Error::Config { .. }));
    }

    #[test]
    fn repeated_and_malformed() {
        assert!(RunConfig::parse("taper.p_t = 0.5\ntaper.p_t = 1").is_err());
        assert!(RunConfig::parse("taper.p_t").is_err());
        let e = RunConfig::parse("pipeline.reg_b = abc").unwrap_err();
        assert!(e.to_string().contains("pipeline.reg_b"));
    }

    #[test]
    fn parses_sections() {
        let c = RunConfig::parse(
            "# run\npipeline.init = rice_factor\npipeline.stages = three_stage\npipeline.final_order = 4\n\
             pipeline.rice_grid = 0.1:0.2, 0.3:0.4\ntaper.family = uniform\ntaper.length = 65\n\
             process.preset = am\nprocess.g_amplitude = 0\nprocess.seed = 7\nsweep.scales = 25, 50\n",
        )
        .unwrap();
        assert_eq!(c.pipeline.init, Init::RiceFactor);
        assert_eq!(c.pipeline.stages, Stages::ThreeStage);
        assert_eq!(c.pipeline.rice_grid, Some(vec![(0.1, 0.2), (0.3, 0.4)]));
        assert_eq!(c.pipeline.taper_length, Some(65));
        assert_eq!(c.process.preset, Preset::am(0.0, 1000.0));
        assert_eq!(c.process.seed, 7);
        assert_eq!(c.sweep.scales, vec![25.0, 50.0]);
    }

    #[test]
    fn preset_parameters_are_checked() {
        let e = RunConfig::parse("process.preset = am\nprocess.level = 2").unwrap_err();
        assert!(e.to_string().contains("process.level"));
        assert!(RunConfig::parse("process.preset = am\nprocess.g_amplitude = 1.5").is_err());
        assert!(RunConfig::parse("pipeline.init = parametric").is_err());
        assert!(RunConfig::parse("process.n_freq_bins = 3").is_err());
    }
}
