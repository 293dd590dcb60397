//! Flat `key=value` run configuration.
//!
//! Every key has a default. A config file holds one `key=value` per line;
//! blank lines and lines starting with `#` are ignored. Command-line flags
//! use the same keys in kebab-case (`--n-normal 3`) and win over the file.
//! Keys whose default is `auto` take their value from the cohort variant.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mishape::anatomy::{
    AcquisitionConfig, ClassLabel, CohortConfig, CohortVariant, LaxView, Phase,
};
use mishape::clinical::{InputAnatomy, InputPhases, VolumeEstimator};
use mishape::harness::{ExperimentSpec, HarnessConfig, Method, Normalization, Task};
use mishape::pointnet::{uniform_grid, ClassifierConfig, TNetWidths, TrainConfig};

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUTPUT_ROOT_ENV: &str = "MISHAPE_OUTPUT_ROOT";

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, default, help }
}

pub const KEYS: &[KeySpec] = &[
    key("seed", "0", "base seed for every random stream"),
    key("output_dir", "", "output directory (default: $MISHAPE_OUTPUT_ROOT or ./mishape-out)"),
    key("results_dir", "", "directory read by `report` (default: output_dir)"),
    // cohort
    key("variant", "dual", "cohort variant: dual | volume_matched | global_only"),
    key("n_normal", "539", "normal subjects"),
    key("n_prevalent", "294", "prevalent-MI subjects"),
    key("n_incident", "235", "incident-MI subjects"),
    key("points_per_structure", "1024", "points sampled per surface and phase"),
    key("noise_free", "false", "zero the population shape variability"),
    key("ef_normal", "auto", "mean ejection fraction of normals"),
    key("ef_prevalent", "auto", "mean ejection fraction of prevalent MI"),
    key("ef_incident", "auto", "mean ejection fraction of incident MI"),
    key("ef_sd", "auto", "ejection fraction sd, all classes"),
    key("thickening_normal", "auto", "mean ES/ED wall ratio of normals"),
    key("thickening_prevalent", "auto", "mean ES/ED wall ratio of prevalent MI"),
    key("thickening_incident", "auto", "mean ES/ED wall ratio of incident MI"),
    key("thickening_sd", "auto", "ES/ED wall ratio sd, all classes"),
    key("defect_prevalent", "auto", "defect suppression of prevalent MI, 0 disables"),
    key("defect_incident", "auto", "defect suppression of incident MI, 0 disables"),
    // acquisition and registration
    key("acq_phase", "ED", "phase sliced by align-demo: ED | ES"),
    key("sax_count", "10", "short-axis slices"),
    key("sax_spacing_mm", "10", "short-axis slice spacing"),
    key("sax_points", "48", "points per short-axis contour"),
    key("lax_points", "720", "points per long-axis contour"),
    key("lax_views", "4ch,2ch", "long-axis views"),
    key("anchor_band_mm", "1", "half-width of the anchor band around a SAX plane"),
    key("shift_std_mm", "3", "in-plane misalignment sd"),
    key("align_subjects", "20", "subjects used by align-demo"),
    key("input_source", "dense", "clouds fed to the experiments: dense | slices"),
    // classifier
    key("input_tnet", "true", "use the input T-Net"),
    key("feature_tnet", "true", "use the feature T-Net"),
    key("encoder_widths", "64,64,64,128,1024", "shared MLP widths"),
    key("head_widths", "512,256,1", "head widths, ending in 1"),
    key("tnet_encoder_widths", "64,128,1024", "T-Net shared MLP widths"),
    key("tnet_head_widths", "512,256", "T-Net head hidden widths"),
    key("batch_norm", "true", "batch normalization in hidden layers"),
    key("ortho_weight", "0.001", "feature-transform orthogonality penalty weight"),
    key("normalization", "unit_sphere", "coordinate map: unit_sphere | fixed:<mm>"),
    key("train_points_per_structure", "all", "points per structure fed to the network"),
    // training
    key("batch_size", "20", "mini-batch size"),
    key("learning_rate", "1e-6", "Adam learning rate"),
    key("epochs", "200", "training epochs"),
    key("dropout_grid", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7", "dropout values searched per fold"),
    key("inner_folds", "3", "folds of the nested dropout search"),
    // experiments
    key("task", "both", "prevalent | incident | both"),
    key("cells", "all", "`all` or `;`-separated ANATOMY,PHASES,METHOD triples"),
    key("folds", "4", "cross-validation folds"),
    key("estimator", "disc", "volume estimator for regression: disc | analytic"),
    key("n_discs", "20", "discs for disc summation"),
    key("ridge", "1e-6", "ridge penalty of the logistic model"),
    // report
    key("report_cell", "best", "cell analysed by `report`: best or a cell id"),
    key("n_cases", "2", "cases per (outcome, class) group in the report"),
];

/// Keys left out of the echoed config because they do not affect results.
const NOT_ECHOED: [&str; 2] = ["output_dir", "results_dir"];

fn bad(key: &str, value: &str, want: &str) -> CliError {
    CliError::Config(format!("{key}={value:?}: expected {want}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let name = key.trim().replace('-', "_");
        let spec = KEYS
            .iter()
            .find(|k| k.name == name)
            .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
        self.values.insert(spec.name, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    /// Applies `key=value` lines.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{}:{}: expected key=value, got {line:?}", origin.display(), i + 1))
            })?;
            self.set(k, v)
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, path)
    }

    /// Applies `--key value` and `--key=value` pairs.
    pub fn apply_flags(&mut self, args: &[String]) -> Result<(), CliError> {
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let Some(flag) = a.strip_prefix("--") else {
                return Err(CliError::Config(format!("unexpected argument {a:?}")));
            };
            match flag.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| CliError::Config(format!("--{flag} needs a value")))?;
                    self.set(flag, v)?;
                }
            }
        }
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, want: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse().map_err(|_| bad(key, v, want))
    }

    fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parse(key, "a non-negative integer")
    }

    fn f64(&self, key: &str) -> Result<f64, CliError> {
        let x: f64 = self.parse(key, "a number")?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(bad(key, self.get(key), "a finite number"))
        }
    }

    fn bool(&self, key: &str) -> Result<bool, CliError> {
        self.parse(key, "true or false")
    }

    fn widths(&self, key: &str) -> Result<Vec<usize>, CliError> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad(key, v, "comma-separated integers")))
            .collect()
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let v = self.get(key);
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad(key, v, "comma-separated numbers")))
            .collect()
    }

    fn auto_f64(&self, key: &str, fallback: f64) -> Result<f64, CliError> {
        if self.get(key) == "auto" {
            Ok(fallback)
        } else {
            self.f64(key)
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed", "an unsigned 64-bit integer")
    }

    pub fn output_dir(&self) -> PathBuf {
        match self.get("output_dir") {
            "" => std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("mishape-out"), PathBuf::from),
            d => PathBuf::from(d),
        }
    }

    pub fn results_dir(&self) -> PathBuf {
        match self.get("results_dir") {
            "" => self.output_dir(),
            d => PathBuf::from(d),
        }
    }

    pub fn variant(&self) -> Result<CohortVariant, CliError> {
        let v = self.get("variant");
        CohortVariant::parse(v).ok_or_else(|| bad("variant", v, "dual, volume_matched or global_only"))
    }

    pub fn cohort(&self) -> Result<CohortConfig, CliError> {
        let mut c = CohortConfig::new(self.variant()?).with_counts(
            self.usize("n_normal")?,
            self.usize("n_prevalent")?,
            self.usize("n_incident")?,
        );
        c.points_per_structure = self.usize("points_per_structure")?;
        if self.bool("noise_free")? {
            c.population = c.population.noise_free();
        }
        for (label, tag) in [
            (ClassLabel::Normal, "normal"),
            (ClassLabel::PrevalentMi, "prevalent"),
            (ClassLabel::IncidentMi, "incident"),
        ] {
            let spec = match label {
                ClassLabel::Normal => &mut c.normal,
                ClassLabel::PrevalentMi => &mut c.prevalent,
                ClassLabel::IncidentMi => &mut c.incident,
            };
            spec.volume_change_fraction = self.auto_f64(&format!("ef_{tag}"), spec.volume_change_fraction)?;
            spec.volume_change_sd = self.auto_f64("ef_sd", spec.volume_change_sd)?;
            spec.global_thickening_factor =
                self.auto_f64(&format!("thickening_{tag}"), spec.global_thickening_factor)?;
            spec.thickening_sd = self.auto_f64("thickening_sd", spec.thickening_sd)?;
            if label != ClassLabel::Normal {
                let key = format!("defect_{tag}");
                if self.get(&key) != "auto" {
                    let s = self.f64(&key)?;
                    if s < 0.0 {
                        return Err(bad(&key, self.get(&key), "a suppression >= 0"));
                    }
                    spec.defect = (s > 0.0).then(|| mishape::anatomy::DefectSpec::with_suppression(s));
                }
            }
        }
        c.population
            .validate()
            .and_then(|_| c.normal.validate())
            .and_then(|_| c.prevalent.validate())
            .and_then(|_| c.incident.validate())
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn acquisition(&self) -> Result<AcquisitionConfig, CliError> {
        let phase = match self.get("acq_phase") {
            "ED" | "ed" => Phase::Ed,
            "ES" | "es" => Phase::Es,
            v => return Err(bad("acq_phase", v, "ED or ES")),
        };
        let views = self
            .get("lax_views")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| match s.trim() {
                "4ch" => Ok(LaxView::FourChamber),
                "2ch" => Ok(LaxView::TwoChamber),
                _ => Err(bad("lax_views", self.get("lax_views"), "a list of 4ch and 2ch")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = AcquisitionConfig {
            phase,
            sax_count: self.usize("sax_count")?,
            sax_spacing_mm: self.f64("sax_spacing_mm")?,
            sax_points: self.usize("sax_points")?,
            lax_points: self.usize("lax_points")?,
            lax_views: views,
            anchor_band_mm: self.f64("anchor_band_mm")?,
            ..AcquisitionConfig::default()
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn shift_std_mm(&self) -> Result<f64, CliError> {
        let s = self.f64("shift_std_mm")?;
        if s < 0.0 {
            return Err(bad("shift_std_mm", self.get("shift_std_mm"), "a value >= 0"));
        }
        Ok(s)
    }

    pub fn align_subjects(&self) -> Result<usize, CliError> {
        self.usize("align_subjects")
    }

    /// `true` when experiments use slice-reconstructed clouds.
    pub fn slice_input(&self) -> Result<bool, CliError> {
        match self.get("input_source") {
            "dense" => Ok(false),
            "slices" => Ok(true),
            v => Err(bad("input_source", v, "dense or slices")),
        }
    }

    pub fn classifier(&self) -> Result<ClassifierConfig, CliError> {
        let head = self.widths("head_widths")?;
        let hidden = head.len().saturating_sub(1);
        let c = ClassifierConfig {
            input_channels: 7,
            use_input_tnet: self.bool("input_tnet")?,
            use_feature_tnet: self.bool("feature_tnet")?,
            encoder_widths: self.widths("encoder_widths")?,
            head_widths: head,
            dropout_probs: vec![0.0; hidden],
            use_batch_norm: self.bool("batch_norm")?,
            ortho_reg_weight: self.f64("ortho_weight")?,
            tnet: TNetWidths {
                encoder: self.widths("tnet_encoder_widths")?,
                head: self.widths("tnet_head_widths")?,
            },
        };
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let t = TrainConfig {
            batch_size: self.usize("batch_size")?,
            learning_rate: self.f64("learning_rate")?,
            epochs: self.usize("epochs")?,
            seed: self.seed()?,
            shuffle: true,
        };
        t.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(t)
    }

    pub fn dropout_grid(&self, hidden_layers: usize) -> Result<Vec<Vec<f64>>, CliError> {
        let vals = self.floats("dropout_grid")?;
        if vals.is_empty() || vals.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(bad("dropout_grid", self.get("dropout_grid"), "values in [0, 1)"));
        }
        Ok(uniform_grid(&vals, hidden_layers))
    }

    pub fn harness(&self) -> Result<HarnessConfig, CliError> {
        let classifier = self.classifier()?;
        let grid = self.dropout_grid(classifier.head_widths.len() - 1)?;
        let estimator = match self.get("estimator") {
            "disc" => VolumeEstimator::Disc {
                n_discs: self.usize("n_discs")?,
            },
            "analytic" => VolumeEstimator::Analytic,
            v => return Err(bad("estimator", v, "disc or analytic")),
        };
        let normalization = match self.get("normalization") {
            "unit_sphere" => Normalization::UnitSphere,
            v => match v.strip_prefix("fixed:").and_then(|mm| mm.parse().ok()) {
                Some(mm) => Normalization::FixedScale(mm),
                None => return Err(bad("normalization", v, "unit_sphere or fixed:<mm>")),
            },
        };
        let points = match self.get("train_points_per_structure") {
            "all" => None,
            _ => Some(self.usize("train_points_per_structure")?),
        };
        let h = HarnessConfig {
            seed: self.seed()?,
            folds: self.usize("folds")?,
            classifier,
            train: self.train()?,
            dropout_grid: grid,
            inner_folds: self.usize("inner_folds")?,
            points_per_structure: points,
            normalization,
            estimator,
            ridge: self.f64("ridge")?,
        };
        h.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(h)
    }

    pub fn tasks(&self) -> Result<Vec<Task>, CliError> {
        match self.get("task") {
            "both" => Ok(vec![Task::Prevalent, Task::Incident]),
            v => Task::parse(v)
                .map(|t| vec![t])
                .ok_or_else(|| bad("task", v, "prevalent, incident or both")),
        }
    }

    /// Selected cells of `task`, in table order.
    pub fn cells(&self, task: Task) -> Result<Vec<ExperimentSpec>, CliError> {
        let table = ExperimentSpec::table(task);
        let v = self.get("cells");
        if v == "all" {
            return Ok(table);
        }
        let mut wanted = Vec::new();
        for item in v.split(';').filter(|s| !s.trim().is_empty()) {
            let parts: Vec<&str> = item.split(',').map(str::trim).collect();
            let [a, p, m] = parts.as_slice() else {
                return Err(bad("cells", v, "ANATOMY,PHASES,METHOD triples"));
            };
            let spec = ExperimentSpec {
                task,
                anatomy: InputAnatomy::parse(a).ok_or_else(|| bad("cells", v, "anatomy LV or LV+RV"))?,
                phases: InputPhases::parse(p).ok_or_else(|| bad("cells", v, "phases ES or ED+ES"))?,
                method: Method::parse(m).ok_or_else(|| bad("cells", v, "method regression or pointnet"))?,
            };
            wanted.push(spec);
        }
        if wanted.is_empty() {
            return Err(bad("cells", v, "at least one cell"));
        }
        Ok(table.into_iter().filter(|s| wanted.contains(s)).collect())
    }

    pub fn report_cell(&self) -> &str {
        self.get("report_cell")
    }

    pub fn n_cases(&self) -> Result<usize, CliError> {
        let n = self.usize("n_cases")?;
        if n == 0 {
            return Err(bad("n_cases", "0", "a positive integer"));
        }
        Ok(n)
    }

    /// Checks every key that parses into a typed setting.
    pub fn validate(&self) -> Result<(), CliError> {
        self.seed()?;
        self.cohort()?;
        self.acquisition()?;
        self.shift_std_mm()?;
        self.align_subjects()?;
        self.slice_input()?;
        self.harness()?;
        for t in self.tasks()? {
            self.cells(t)?;
        }
        self.n_cases()?;
        Ok(())
    }

    /// The config with `auto` values replaced by what the variant implies.
    pub fn resolved(&self) -> Result<RunConfig, CliError> {
        let c = self.cohort()?;
        let mut out = self.clone();
        for (spec, tag) in [(&c.normal, "normal"), (&c.prevalent, "prevalent"), (&c.incident, "incident")] {
            out.values.insert(key_name(&format!("ef_{tag}")), spec.volume_change_fraction.to_string());
            out.values.insert(key_name(&format!("thickening_{tag}")), spec.global_thickening_factor.to_string());
            if tag != "normal" {
                let s = spec.defect.as_ref().map_or(0.0, |d| d.suppression);
                out.values.insert(key_name(&format!("defect_{tag}")), s.to_string());
            }
        }
        out.values.insert("ef_sd", c.prevalent.volume_change_sd.to_string());
        out.values.insert("thickening_sd", c.prevalent.thickening_sd.to_string());
        Ok(out)
    }

    /// `key=value` lines in registry order, without the output locations.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS.iter().filter(|k| !NOT_ECHOED.contains(&k.name)) {
            let _ = writeln!(out, "{}={}", k.name, self.get(k.name));
        }
        out
    }
}

fn key_name(name: &str) -> &'static str {
    KEYS.iter().find(|k| k.name == name).map(|k| k.name).expect("registered key")
}

/// `--help` text listing every key.
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (file: key=value, flag: --key-name value):\n");
    for k in KEYS {
        let _ = writeln!(out, "  {:<28} {:<20} {}", k.name.replace('_', "-"), k.default, k.help);
    }
    out
}
