//! Deterministic synthetic dialogue generation.
//!
//! Features are Gaussian class clusters with controllable separation. The
//! `Complementary` mode is built so that neither modality alone identifies
//! all classes: text tells class 0 from class 1 but gives classes 2 and 3
//! the same mean, audio tells 2 from 3 but gives 0 and 1 the same mean.
//! Only the joint view makes all four classes separable.

use crate::data::{Dataset, DatasetSplit, Dialogue, FeatureHeader, UtteranceRecord};
use crate::error::{LpgError, Result};
use crate::tensor::gauss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    /// both modalities separate every class
    Both,
    TextOnlyInformative,
    AudioOnlyInformative,
    /// text separates {0,1}, audio separates {2,3}; fusion required
    Complementary,
}

impl std::str::FromStr for SynthMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "both" => Ok(SynthMode::Both),
            "text-only-informative" | "text-only" => Ok(SynthMode::TextOnlyInformative),
            "audio-only-informative" | "audio-only" => Ok(SynthMode::AudioOnlyInformative),
            "complementary" => Ok(SynthMode::Complementary),
            _ => Err(format!("unknown synth mode '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub f_t: usize,
    pub f_a: usize,
    pub train_dialogues: usize,
    pub val_dialogues: usize,
    pub test_dialogues: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// scale of the class-mean offsets relative to unit noise
    pub separation: f64,
    pub mode: SynthMode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            f_t: 64,
            f_a: 64,
            train_dialogues: 100,
            val_dialogues: 20,
            test_dialogues: 40,
            min_len: 4,
            max_len: 12,
            separation: 1.0,
            mode: SynthMode::Both,
        }
    }
}

fn class_names(c: usize) -> Vec<String> {
    if c == 4 {
        ["happy", "sad", "neutral", "angry"].iter().map(|s| s.to_string()).collect()
    } else {
        (0..c).map(|i| format!("class{i}")).collect()
    }
}

fn randn_vec(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| gauss(rng) * scale).collect()
}

fn neg(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| -x).collect()
}

/// Per-class mean vectors for one modality under a given mode.
fn class_means(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let c = spec.classes;
    match spec.mode {
        SynthMode::Both => {
            let t = (0..c).map(|_| randn_vec(spec.f_t, spec.separation, rng)).collect();
            let a = (0..c).map(|_| randn_vec(spec.f_a, spec.separation, rng)).collect();
            (t, a)
        }
        SynthMode::TextOnlyInformative => {
            let t = (0..c).map(|_| randn_vec(spec.f_t, spec.separation, rng)).collect();
            let a = vec![vec![0.0; spec.f_a]; c];
            (t, a)
        }
        SynthMode::AudioOnlyInformative => {
            let t = vec![vec![0.0; spec.f_t]; c];
            let a = (0..c).map(|_| randn_vec(spec.f_a, spec.separation, rng)).collect();
            (t, a)
        }
        SynthMode::Complementary => {
            // c0: (+v, 0)  c1: (-v, 0)  c2: (+v, +w)  c3: (+v, -w)
            let v = randn_vec(spec.f_t, spec.separation, rng);
            let w = randn_vec(spec.f_a, spec.separation, rng);
            let t = vec![v.clone(), neg(&v), v.clone(), v];
            let a = vec![vec![0.0; spec.f_a], vec![0.0; spec.f_a], w.clone(), neg(&w)];
            (t, a)
        }
    }
}

fn gen_dialogues(
    spec: &SynthSpec,
    prefix: &str,
    count: usize,
    t_means: &[Vec<f64>],
    a_means: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Vec<Dialogue> {
    (0..count)
        .map(|i| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let utterances = (0..len)
                .map(|_| {
                    let y = rng.gen_range(0..spec.classes);
                    let text_feat: Vec<f64> =
                        t_means[y].iter().map(|m| m + gauss(rng)).collect();
                    let audio_feat: Vec<f64> =
                        a_means[y].iter().map(|m| m + gauss(rng)).collect();
                    UtteranceRecord { text_feat, audio_feat, label: y as i64 }
                })
                .collect();
            Dialogue { id: format!("{prefix}-{i:04}"), utterances }
        })
        .collect()
}

/// Deterministic for a fixed seed: same seed, same bits.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<DatasetSplit> {
    if spec.classes < 2 {
        return Err(LpgError::contract(format!("need >= 2 classes, got {}", spec.classes)));
    }
    if spec.mode == SynthMode::Complementary && spec.classes != 4 {
        return Err(LpgError::contract(
            "complementary mode is defined for exactly 4 classes".to_string(),
        ));
    }
    if spec.min_len < 1 || spec.max_len < spec.min_len {
        return Err(LpgError::contract(format!(
            "bad length range [{}, {}]",
            spec.min_len, spec.max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_means, a_means) = class_means(spec, &mut rng);
    let header = FeatureHeader {
        version: 1,
        f_t: spec.f_t,
        f_a: spec.f_a,
        num_classes: spec.classes,
        labels: class_names(spec.classes),
    };
    let train = gen_dialogues(spec, "train", spec.train_dialogues, &t_means, &a_means, &mut rng);
    let val = gen_dialogues(spec, "val", spec.val_dialogues, &t_means, &a_means, &mut rng);
    let test = gen_dialogues(spec, "test", spec.test_dialogues, &t_means, &a_means, &mut rng);
    Ok(DatasetSplit { header, train, val, test })
}

impl DatasetSplit {
    pub fn train_dataset(&self) -> Dataset {
        Dataset { header: self.header.clone(), dialogues: self.train.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::probe::{linear_probe_accuracy, modality_samples, Modality};

    #[test]
    fn same_seed_generates_identical_data() {
        let spec = SynthSpec::default();
        let a = synth_generate(&spec, 123).unwrap();
        let b = synth_generate(&spec, 123).unwrap();
        assert_eq!(serde_json::to_string(&a.train).unwrap(), serde_json::to_string(&b.train).unwrap());
        assert_eq!(serde_json::to_string(&a.test).unwrap(), serde_json::to_string(&b.test).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let spec = SynthSpec::default();
        let a = synth_generate(&spec, 1).unwrap();
        let b = synth_generate(&spec, 2).unwrap();
        assert_ne!(
            serde_json::to_string(&a.train).unwrap(),
            serde_json::to_string(&b.train).unwrap()
        );
    }

    #[test]
    fn split_sizes_and_dims_match_spec() {
        let spec = SynthSpec { train_dialogues: 7, val_dialogues: 3, test_dialogues: 5, ..Default::default() };
        let d = synth_generate(&spec, 9).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (7, 3, 5));
        for dialogue in d.train.iter().chain(&d.val).chain(&d.test) {
            assert!((spec.min_len..=spec.max_len).contains(&dialogue.utterances.len()));
            for u in &dialogue.utterances {
                assert_eq!(u.text_feat.len(), spec.f_t);
                assert_eq!(u.audio_feat.len(), spec.f_a);
                assert!((0..spec.classes as i64).contains(&u.label));
            }
        }
        assert_eq!(d.header.labels.len(), spec.classes);
    }

    #[test]
    fn mode_strings_parse() {
        for (s, m) in [
            ("both", SynthMode::Both),
            ("text-only-informative", SynthMode::TextOnlyInformative),
            ("audio-only-informative", SynthMode::AudioOnlyInformative),
            ("complementary", SynthMode::Complementary),
        ] {
            assert_eq!(s.parse::<SynthMode>().unwrap(), m);
        }
        assert!("bogus".parse::<SynthMode>().is_err());
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut spec = SynthSpec { classes: 1, ..Default::default() };
        assert!(synth_generate(&spec, 0).is_err());
        spec.classes = 6;
        spec.mode = SynthMode::Complementary;
        assert!(synth_generate(&spec, 0).is_err());
        spec.classes = 4;
        spec.min_len = 5;
        spec.max_len = 2;
        assert!(synth_generate(&spec, 0).is_err());
    }

    #[test]
    fn complementary_modality_probes_show_partial_information() {
        let spec = SynthSpec { mode: SynthMode::Complementary, ..Default::default() };
        let d = synth_generate(&spec, 11).unwrap();
        let probe = |m: Modality| {
            linear_probe_accuracy(
                &modality_samples(&d.train, m),
                &modality_samples(&d.test, m),
                spec.classes,
                300,
                0.5,
            )
        };
        let text = probe(Modality::Text);
        let audio = probe(Modality::Audio);
        assert!(text < 0.60, "text-alone probe should stay near chance-pair level, got {text}");
        assert!(audio < 0.85, "audio-alone probe should be partial, got {audio}");
        assert!(audio > 0.55, "audio should still carry some signal, got {audio}");
    }

    #[test]
    fn both_mode_is_linearly_separable_per_modality() {
        let spec = SynthSpec::default();
        let d = synth_generate(&spec, 11).unwrap();
        let acc = linear_probe_accuracy(
            &modality_samples(&d.train, Modality::Text),
            &modality_samples(&d.test, Modality::Text),
            spec.classes,
            300,
            0.5,
        );
        assert!(acc > 0.9, "both-mode text probe {acc}");
    }
}
