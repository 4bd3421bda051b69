//! Flat `key = value` configuration files covering the simulator, the
//! factor weights and the optimizer. Every key is optional; an absent key
//! keeps its built-in default. Unknown keys are reported back as warnings
//! so a typo never silently reverts a setting to its default.

use std::fmt;

use rowloc::eval::parse_cues;
use rowloc::pipeline::{GpsMode, PipelineConfig};
use rowloc::sim::{FieldConfig, NoiseConfig, SteeringMode};

/// Everything one config file can set: field layout, sensor noise,
/// pipeline cues and weights, and elevation-map export geometry.
#[derive(Debug, Clone)]
pub struct Config {
    pub field: FieldConfig,
    pub noise: NoiseConfig,
    pub pipeline: PipelineConfig,
    /// Grid spacing of exported elevation maps, metres.
    pub dem_spacing: f64,
    /// Margin around the field in exported elevation maps, metres.
    pub dem_margin: f64,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            field: FieldConfig::default(),
            noise: NoiseConfig::default(),
            pipeline: PipelineConfig::default(),
            dem_spacing: 5.0,
            dem_margin: 10.0,
        }
    }
}

/// A rejected config line: its number and what was wrong with it.
#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Parses one `key = value` per line, starting from defaults. Blank lines
/// and `#` comments are skipped. Returns the config together with one
/// warning per unknown key; malformed lines and invalid values fail with
/// the offending line number.
pub fn parse_config(text: &str) -> Result<(Config, Vec<String>), ConfigError> {
    let mut cfg = Config::default();
    let mut warnings = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError {
                line,
                message: format!("expected `key = value`, got `{trimmed}`"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(ConfigError {
                line,
                message: "missing key before `=`".to_string(),
            });
        }
        match apply(&mut cfg, key, value) {
            Ok(true) => {}
            Ok(false) => warnings.push(format!("line {line}: unknown key `{key}`")),
            Err(message) => {
                return Err(ConfigError {
                    line,
                    message: format!("{key}: {message}"),
                })
            }
        }
    }
    Ok((cfg, warnings))
}

/// Routes one key to its field, validating the value. Returns false for
/// keys that do not exist.
fn apply(cfg: &mut Config, key: &str, value: &str) -> Result<bool, String> {
    match key {
        "rows" => cfg.field.rows = count(value)?,
        "row_length" => cfg.field.row_length = positive(value)?,
        "row_spacing" => {
            let v = positive(value)?;
            cfg.field.row_spacing = v;
            cfg.pipeline.row_spacing = v;
        }
        "amplitude" => cfg.field.amplitude = non_negative(value)?,
        "wavelength_1" => cfg.field.wavelengths.0 = positive(value)?,
        "wavelength_2" => cfg.field.wavelengths.1 = positive(value)?,
        "speed" => cfg.field.speed = positive(value)?,
        "mode" => cfg.field.mode = steering(value)?,
        "seed" => cfg.field.seed = integer(value)?,
        "wo_sigma_t" => cfg.noise.wo_sigma_t = non_negative(value)?,
        "wo_sigma_yaw" => cfg.noise.wo_sigma_yaw = non_negative(value)?,
        "vo_sigma_t" => cfg.noise.vo_sigma_t = non_negative(value)?,
        "vo_sigma_r" => cfg.noise.vo_sigma_r = non_negative(value)?,
        "vo_fail_rate" => cfg.noise.vo_fail_rate = non_negative(value)?,
        "vo_fail_duration" => cfg.noise.vo_fail_duration = non_negative(value)?,
        "vo_fail_magnitude" => cfg.noise.vo_fail_magnitude = positive(value)?,
        "lid_sigma_t" => cfg.noise.lid_sigma_t = non_negative(value)?,
        "lid_sigma_r" => cfg.noise.lid_sigma_r = non_negative(value)?,
        "rtk_sigma_xy" => cfg.noise.rtk_sigma.0 = non_negative(value)?,
        "rtk_sigma_z" => cfg.noise.rtk_sigma.1 = non_negative(value)?,
        "ppp_sigma_xy" => cfg.noise.ppp_sigma.0 = non_negative(value)?,
        "ppp_sigma_z" => cfg.noise.ppp_sigma.1 = non_negative(value)?,
        "gps_mode" => cfg.noise.gps_mode = gps_mode(value)?,
        "gps_outage" => cfg.noise.gps_outages.push(outage(value)?),
        "imu_sigma" => cfg.noise.imu_sigma = non_negative(value)?,
        "step_wo" => cfg.pipeline.step_wo = positive(value)?,
        "window" => cfg.pipeline.window = flag(value)?,
        "w_min" => cfg.pipeline.w_min = count(value)?,
        "cues" => cfg.pipeline.cues = parse_cues(value)?,
        "lambda_vo_r" => cfg.pipeline.weights.lambda_vo_r = positive(value)?,
        "lambda_vo_t" => cfg.pipeline.weights.lambda_vo_t = positive(value)?,
        "lambda_mrf" => cfg.pipeline.weights.lambda_mrf = positive(value)?,
        "w_dem_z" => cfg.pipeline.weights.w_dem_z = positive(value)?,
        "vo_fail_threshold" => cfg.pipeline.weights.vo_fail_threshold = positive(value)?,
        "vo_fail_scale" => cfg.pipeline.weights.vo_fail_scale = positive(value)?,
        "max_iterations" => cfg.pipeline.solver.max_iterations = count(value)?,
        "chi2_rel_tol" => cfg.pipeline.solver.chi2_rel_tol = non_negative(value)?,
        "step_tol" => cfg.pipeline.solver.step_tol = non_negative(value)?,
        "lm_lambda_init" => cfg.pipeline.solver.lm_lambda_init = positive(value)?,
        "lm_lambda_factor" => cfg.pipeline.solver.lm_lambda_factor = positive(value)?,
        "jacobian_eps" => cfg.pipeline.solver.jacobian_eps = positive(value)?,
        "dem_spacing" => cfg.dem_spacing = positive(value)?,
        "dem_margin" => cfg.dem_margin = non_negative(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn number(value: &str) -> Result<f64, String> {
    match value.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("expected a number, got `{value}`")),
    }
}

fn positive(value: &str) -> Result<f64, String> {
    let v = number(value)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got `{value}`"))
    }
}

fn non_negative(value: &str) -> Result<f64, String> {
    let v = number(value)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("expected a non-negative number, got `{value}`"))
    }
}

fn integer(value: &str) -> Result<u64, String> {
    value
        .parse::<u64>()
        .map_err(|_| format!("expected a non-negative integer, got `{value}`"))
}

fn count(value: &str) -> Result<usize, String> {
    match value.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("expected a positive integer, got `{value}`")),
    }
}

fn flag(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected `true` or `false`, got `{value}`")),
    }
}

fn steering(value: &str) -> Result<SteeringMode, String> {
    match value {
        "serpentine" => Ok(SteeringMode::Serpentine),
        "same_heading" => Ok(SteeringMode::SameHeading),
        _ => Err(format!(
            "expected `serpentine` or `same_heading`, got `{value}`"
        )),
    }
}

fn gps_mode(value: &str) -> Result<GpsMode, String> {
    GpsMode::from_name(value).ok_or_else(|| format!("expected `RTK` or `PPP`, got `{value}`"))
}

fn outage(value: &str) -> Result<(f64, f64, GpsMode), String> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    let [start, end, mode] = parts.as_slice() else {
        return Err(format!("expected `<start> <end> <RTK|PPP>`, got `{value}`"));
    };
    let start = non_negative(start)?;
    let end = non_negative(end)?;
    if end < start {
        return Err(format!("outage ends at {end} before it starts at {start}"));
    }
    Ok((start, end, gps_mode(mode)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rowloc::factors::FactorKind;

    #[test]
    fn empty_text_keeps_defaults() {
        let (cfg, warnings) = parse_config("").unwrap();
        assert_eq!(cfg.pipeline.step_wo, 0.3);
        assert_eq!(cfg.field.rows, 6);
        assert_eq!(cfg.noise.imu_sigma, 0.01);
        assert!(warnings.is_empty());
    }

    #[test]
    fn single_key_overrides_one_default() {
        let (cfg, warnings) = parse_config("lambda_mrf = 2.0").unwrap();
        assert_eq!(cfg.pipeline.weights.lambda_mrf, 2.0);
        assert_eq!(cfg.pipeline.weights.w_dem_z, 5.0);
        assert_eq!(cfg.pipeline.step_wo, 0.3);
        assert!(warnings.is_empty());
    }

    #[test]
    fn unknown_key_warns_with_line_number() {
        let (cfg, warnings) = parse_config("step_wo = 0.5\nstep_w0 = 0.7\n").unwrap();
        assert_eq!(cfg.pipeline.step_wo, 0.5);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("line 2"));
        assert!(warnings[0].contains("step_w0"));
    }

    #[test]
    fn negative_step_is_rejected() {
        let err = parse_config("step_wo = -1").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.message.contains("step_wo"));
    }

    #[test]
    fn malformed_line_is_rejected_with_its_number() {
        let err = parse_config("rows = 4\nnot a pair\n").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let (cfg, warnings) = parse_config("# layout\n\nrows = 3\n").unwrap();
        assert_eq!(cfg.field.rows, 3);
        assert!(warnings.is_empty());
    }

    #[test]
    fn row_spacing_sets_field_and_pipeline() {
        let (cfg, _) = parse_config("row_spacing = 2.5").unwrap();
        assert_eq!(cfg.field.row_spacing, 2.5);
        assert_eq!(cfg.pipeline.row_spacing, 2.5);
    }

    #[test]
    fn cue_masks_parse_into_kinds() {
        let (cfg, _) = parse_config("cues = GPS+WO+VO").unwrap();
        assert_eq!(cfg.pipeline.cues.len(), 3);
        assert!(cfg.pipeline.cues.contains(&FactorKind::Gps));
        assert!(cfg.pipeline.cues.contains(&FactorKind::Vo));
    }

    #[test]
    fn outages_accumulate_in_order() {
        let text = "gps_outage = 10 20 PPP\ngps_outage = 30 40 PPP\n";
        let (cfg, _) = parse_config(text).unwrap();
        assert_eq!(cfg.noise.gps_outages.len(), 2);
        assert_eq!(cfg.noise.gps_outages[0].0, 10.0);
        assert_eq!(cfg.noise.gps_outages[1].1, 40.0);
    }

    #[test]
    fn bad_values_name_the_key() {
        for text in [
            "rows = zero",
            "mode = circle",
            "gps_mode = DGPS",
            "window = yes",
            "gps_outage = 20 10 PPP",
        ] {
            let err = parse_config(text).unwrap_err();
            assert_eq!(err.line, 1, "{text}");
            let key = text.split('=').next().unwrap().trim();
            assert!(err.message.contains(key), "{err}");
        }
    }
}
