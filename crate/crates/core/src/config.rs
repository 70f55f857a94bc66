//! Plain-text `key = value` experiment configuration.
//!
//! Keys are `section.field` (`synth`, `model`, `train`); a bare field name is
//! accepted when exactly one section has it. `#` starts a comment. A `preset`
//! key (`paper` or `small`) selects the starting point and is applied before
//! every other key regardless of position.

use std::path::Path;
use std::str::FromStr;

use crate::data::Interval;
use crate::error::{Error, Result};
use crate::train::ExperimentConfig;

/// Canonical keys with a one-line description, in rendering order.
pub const KEYS: &[(&str, &str)] = &[
    ("synth.n_samples", "samples generated before splitting"),
    ("synth.image_size", "CxHxW; 3 channels renders nested center crops"),
    ("synth.positive_ratio", "fraction of dilated (positive) samples"),
    ("synth.rotation_range_train", "chamber rotation in degrees, lo:hi"),
    ("synth.rotation_range_test", "rotation range of the shifted test set, lo:hi"),
    ("synth.translation_range", "max chamber offset in pixels per axis"),
    ("synth.width_normal", "chamber width in pixels for normal samples, lo:hi"),
    ("synth.width_dilated", "chamber width in pixels for dilated samples, lo:hi"),
    ("synth.chamber_length", "chamber length in pixels, lo:hi"),
    ("synth.allow_width_overlap", "permit overlapping width intervals"),
    ("synth.noise_sigma", "std of additive Gaussian pixel noise"),
    ("synth.seed", "data generation and split seed"),
    ("model.architecture", "cardiocaps | cnn1 | cnn2"),
    ("model.hidden_dim", "conv and primary-capsule channels"),
    ("model.conv_kernel", "kernel of the first conv and primary capsule conv"),
    ("model.primary_stride", "stride of the primary capsule conv"),
    ("model.d_primary", "primary capsule dimension"),
    ("model.d_digit", "digit capsule dimension"),
    ("model.affine_kind", "shared | conv | constant"),
    ("model.routing", "attention | dynamic"),
    ("model.routing_iterations", "dynamic routing iterations"),
    ("model.softmax_axis", "attention normalization axis: input_caps | output_caps"),
    ("model.scale_by_sqrt_d", "divide attention logits by sqrt(d_digit)"),
    ("model.m_plus", "margin for the present class"),
    ("model.m_minus", "margin for absent classes"),
    ("model.lambda_neg", "down-weighting of absent-class terms"),
    ("model.weight_mode", "class weights: inverse | literal | uniform"),
    ("model.lambda_reg", "coefficient of the auxiliary regression loss"),
    ("model.lambda_recon", "coefficient of the reconstruction loss"),
    ("model.cnn_kernel", "conv kernel of the CNN baselines"),
    ("train.lr", "Adam learning rate"),
    ("train.batch_size", "training batch size"),
    ("train.max_epochs", "epoch limit"),
    ("train.patience", "epochs without validation improvement before stopping"),
    ("train.seed", "parameter initialization and batch shuffling seed"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.eps", "Adam denominator guard"),
    ("train.split", "train:validation:test fractions"),
    ("train.shifted_test", "evaluate on a test set drawn from rotation_range_test"),
];

pub const PRESETS: &[&str] = &["paper", "small"];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "paper" => Ok(ExperimentConfig::default()),
        "small" => Ok(ExperimentConfig::small()),
        other => Err(Error::config(format!("unknown preset `{other}` (expected paper or small)"))),
    }
}

/// Maps a bare or dotted key to its canonical form.
pub fn resolve_key(key: &str) -> Result<&'static str> {
    if key.contains('.') {
        return KEYS
            .iter()
            .map(|(k, _)| *k)
            .find(|k| *k == key)
            .ok_or_else(|| Error::config(format!("unknown key `{key}`")));
    }
    let hits: Vec<&'static str> = KEYS
        .iter()
        .map(|(k, _)| *k)
        .filter(|k| k.split_once('.').map(|(_, f)| f) == Some(key))
        .collect();
    match hits.as_slice() {
        [one] => Ok(one),
        [] => Err(Error::config(format!("unknown key `{key}`"))),
        many => Err(Error::config(format!("key `{key}` is ambiguous; use one of {}", many.join(", ")))),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_image_size(key: &str, value: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = value.split('x').collect();
    match parts.as_slice() {
        [c, h, w] => Ok((parse(key, c)?, parse(key, h)?, parse(key, w)?)),
        _ => Err(Error::config(format!("`{key}` expects CxHxW, got `{value}`"))),
    }
}

fn parse_split(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split(':').collect();
    match parts.as_slice() {
        [a, b, c] => Ok([parse(key, a)?, parse(key, b)?, parse(key, c)?]),
        _ => Err(Error::config(format!("`{key}` expects train:val:test, got `{value}`"))),
    }
}

/// Sets one key. Values are validated for syntax only; semantic checks run
/// when the configuration is used.
pub fn set(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let k = resolve_key(key)?;
    let v = value.trim();
    let (s, m, t) = (&mut cfg.synth, &mut cfg.model, &mut cfg.train);
    match k {
        "synth.n_samples" => s.n_samples = parse(k, v)?,
        "synth.image_size" => s.image_size = parse_image_size(k, v)?,
        "synth.positive_ratio" => s.positive_ratio = parse(k, v)?,
        "synth.rotation_range_train" => s.rotation_range_train = v.parse::<Interval>()?,
        "synth.rotation_range_test" => s.rotation_range_test = v.parse::<Interval>()?,
        "synth.translation_range" => s.translation_range = parse(k, v)?,
        "synth.width_normal" => s.width_normal = v.parse::<Interval>()?,
        "synth.width_dilated" => s.width_dilated = v.parse::<Interval>()?,
        "synth.chamber_length" => s.chamber_length = v.parse::<Interval>()?,
        "synth.allow_width_overlap" => s.allow_width_overlap = parse_bool(k, v)?,
        "synth.noise_sigma" => s.noise_sigma = parse(k, v)?,
        "synth.seed" => s.seed = parse(k, v)?,
        "model.architecture" => m.architecture = v.parse()?,
        "model.hidden_dim" => m.hidden_dim = parse(k, v)?,
        "model.conv_kernel" => m.conv_kernel = parse(k, v)?,
        "model.primary_stride" => m.primary_stride = parse(k, v)?,
        "model.d_primary" => m.d_primary = parse(k, v)?,
        "model.d_digit" => m.d_digit = parse(k, v)?,
        "model.affine_kind" => m.affine_kind = v.parse()?,
        "model.routing" => m.routing.method = v.parse()?,
        "model.routing_iterations" => m.routing.iterations = parse(k, v)?,
        "model.softmax_axis" => m.routing.softmax_axis = v.parse()?,
        "model.scale_by_sqrt_d" => m.routing.scale_by_sqrt_d = parse_bool(k, v)?,
        "model.m_plus" => m.margin.m_plus = parse(k, v)?,
        "model.m_minus" => m.margin.m_minus = parse(k, v)?,
        "model.lambda_neg" => m.margin.lambda_neg = parse(k, v)?,
        "model.weight_mode" => m.loss.weight_mode = v.parse()?,
        "model.lambda_reg" => m.loss.lambda_reg = parse(k, v)?,
        "model.lambda_recon" => m.loss.lambda_recon = parse(k, v)?,
        "model.cnn_kernel" => m.cnn_kernel = parse(k, v)?,
        "train.lr" => t.lr = parse(k, v)?,
        "train.batch_size" => t.batch_size = parse(k, v)?,
        "train.max_epochs" => t.max_epochs = parse(k, v)?,
        "train.patience" => t.patience = parse(k, v)?,
        "train.seed" => t.seed = parse(k, v)?,
        "train.beta1" => t.beta1 = parse(k, v)?,
        "train.beta2" => t.beta2 = parse(k, v)?,
        "train.eps" => t.eps = parse(k, v)?,
        "train.split" => cfg.split = parse_split(k, v)?,
        "train.shifted_test" => cfg.shifted_test = parse_bool(k, v)?,
        _ => unreachable!("every canonical key is handled"),
    }
    Ok(())
}

/// Current value of a canonical key in the syntax [`set`] accepts.
pub fn get(cfg: &ExperimentConfig, key: &str) -> Result<String> {
    let k = resolve_key(key)?;
    let (s, m, t) = (&cfg.synth, &cfg.model, &cfg.train);
    Ok(match k {
        "synth.n_samples" => s.n_samples.to_string(),
        "synth.image_size" => format!("{}x{}x{}", s.image_size.0, s.image_size.1, s.image_size.2),
        "synth.positive_ratio" => s.positive_ratio.to_string(),
        "synth.rotation_range_train" => s.rotation_range_train.to_string(),
        "synth.rotation_range_test" => s.rotation_range_test.to_string(),
        "synth.translation_range" => s.translation_range.to_string(),
        "synth.width_normal" => s.width_normal.to_string(),
        "synth.width_dilated" => s.width_dilated.to_string(),
        "synth.chamber_length" => s.chamber_length.to_string(),
        "synth.allow_width_overlap" => s.allow_width_overlap.to_string(),
        "synth.noise_sigma" => s.noise_sigma.to_string(),
        "synth.seed" => s.seed.to_string(),
        "model.architecture" => m.architecture.to_string(),
        "model.hidden_dim" => m.hidden_dim.to_string(),
        "model.conv_kernel" => m.conv_kernel.to_string(),
        "model.primary_stride" => m.primary_stride.to_string(),
        "model.d_primary" => m.d_primary.to_string(),
        "model.d_digit" => m.d_digit.to_string(),
        "model.affine_kind" => m.affine_kind.to_string(),
        "model.routing" => m.routing.method.to_string(),
        "model.routing_iterations" => m.routing.iterations.to_string(),
        "model.softmax_axis" => m.routing.softmax_axis.to_string(),
        "model.scale_by_sqrt_d" => m.routing.scale_by_sqrt_d.to_string(),
        "model.m_plus" => m.margin.m_plus.to_string(),
        "model.m_minus" => m.margin.m_minus.to_string(),
        "model.lambda_neg" => m.margin.lambda_neg.to_string(),
        "model.weight_mode" => m.loss.weight_mode.to_string(),
        "model.lambda_reg" => m.loss.lambda_reg.to_string(),
        "model.lambda_recon" => m.loss.lambda_recon.to_string(),
        "model.cnn_kernel" => m.cnn_kernel.to_string(),
        "train.lr" => t.lr.to_string(),
        "train.batch_size" => t.batch_size.to_string(),
        "train.max_epochs" => t.max_epochs.to_string(),
        "train.patience" => t.patience.to_string(),
        "train.seed" => t.seed.to_string(),
        "train.beta1" => t.beta1.to_string(),
        "train.beta2" => t.beta2.to_string(),
        "train.eps" => t.eps.to_string(),
        "train.split" => format!("{}:{}:{}", cfg.split[0], cfg.split[1], cfg.split[2]),
        "train.shifted_test" => cfg.shifted_test.to_string(),
        _ => unreachable!("every canonical key is handled"),
    })
}

/// Every key with its description and current value.
pub fn render(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut section = "";
    for (k, doc) in KEYS {
        let s = k.split_once('.').map_or("", |(s, _)| s);
        if s != section {
            if !section.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("# [{s}]\n"));
            section = s;
        }
        out.push_str(&format!("# {doc}\n{k} = {}\n", get(cfg, k).expect("canonical key")));
    }
    out
}

/// `(line, key, value)` triples from a config text.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Builds a configuration from text, then applies `overrides` in order.
pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let lines = parse_lines(text)?;
    let mut all = lines
        .iter()
        .map(|(_, k, v)| (k.as_str(), v.as_str()))
        .chain(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())));
    let preset_name = all.rfind(|(k, _)| *k == "preset").map(|(_, v)| v);
    let mut cfg = match preset_name {
        Some(name) => preset(name)?,
        None => ExperimentConfig::default(),
    };
    for (line, k, v) in &lines {
        if k != "preset" {
            set(&mut cfg, k, v).map_err(|e| Error::config(format!("line {line}: {e}")))?;
        }
    }
    for (k, v) in overrides {
        if k != "preset" {
            set(&mut cfg, k, v)?;
        }
    }
    Ok(cfg)
}

pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    from_text(&std::fs::read_to_string(path)?, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_then_parse_is_identity() {
        for cfg in [ExperimentConfig::default(), ExperimentConfig::small()] {
            assert_eq!(from_text(&render(&cfg), &[]).unwrap(), cfg);
        }
    }

    #[test]
    fn bare_and_dotted_keys() {
        let cfg = from_text("hidden_dim = 8\ntrain.seed = 3 # trailing comment\n", &[]).unwrap();
        assert_eq!(cfg.model.hidden_dim, 8);
        assert_eq!(cfg.train.seed, 3);
        let err = from_text("seed = 3", &[]).unwrap_err().to_string();
        assert!(err.contains("ambiguous"), "{err}");
        assert!(from_text("nonsense = 1", &[]).is_err());
    }

    #[test]
    fn preset_applies_first_and_overrides_win() {
        let text = "hidden_dim = 24\npreset = small\n";
        let cfg = from_text(text, &[("lr".into(), "0.01".into())]).unwrap();
        assert_eq!(cfg.model.hidden_dim, 24);
        assert_eq!(cfg.train.lr, 0.01);
        let cfg = from_text("", &[("preset".into(), "small".into())]).unwrap();
        assert_eq!(cfg, ExperimentConfig::small());
    }

    #[test]
    fn every_key_documented_and_settable() {
        let cfg = ExperimentConfig::default();
        for (k, doc) in KEYS {
            assert!(!doc.is_empty());
            let mut c = cfg.clone();
            set(&mut c, k, &get(&cfg, k).unwrap()).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn syntax_errors_name_the_line() {
        let err = from_text("lr = 0.1\nbatch_size = many\n", &[]).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(from_text("no equals sign", &[]).is_err());
    }
}
