//! End-to-end decoding systems and their timing/accuracy evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::wer::{wer, CorpusWer};
use super::{SimError, SimUtterance};
use crate::correct::{correct_pipeline, CorrectionConfig};
use crate::ctc::{greedy_decode, prefix_beam_search, FusionLm};
use crate::fusion::{rescore_nbest, RescoreLm};
use crate::lexicon::Vocab;
use crate::lm::{MlmScorer, ModelKind, NgramLm, PcMlmModel, PcMlmScorer};
use crate::TokenId;

/// A complete decoding recipe, parseable from the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum System {
    Greedy,
    /// Greedy decode plus masked error correction with the given model.
    Ec(ModelKind),
    Beam { width: usize },
    /// Beam search, then n-best rescoring with the n-gram model.
    Rescore { width: usize, n: usize, weight: f64 },
    /// Beam search with shallow n-gram fusion.
    Fusion { width: usize, weight: f64 },
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            System::Greedy => write!(f, "greedy"),
            System::Ec(ModelKind::Mlm) => write!(f, "ec-mlm"),
            System::Ec(ModelKind::Pcmlm) => write!(f, "ec-pcmlm"),
            System::Ec(ModelKind::DelPcmlm) => write!(f, "ec-del-pcmlm"),
            System::Beam { width } => write!(f, "beam:{width}"),
            System::Rescore { width, n, weight } => write!(f, "rescore:{width}:{n}:{weight}"),
            System::Fusion { width, weight } => write!(f, "fusion:{width}:{weight}"),
        }
    }
}

impl FromStr for System {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        let unknown = || SimError::UnknownSystem(s.to_owned());
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["greedy"] => Ok(System::Greedy),
            ["ec-mlm"] => Ok(System::Ec(ModelKind::Mlm)),
            ["ec-pcmlm" | "ec"] => Ok(System::Ec(ModelKind::Pcmlm)),
            ["ec-del-pcmlm" | "ec-del"] => Ok(System::Ec(ModelKind::DelPcmlm)),
            // Bare short forms fall back to the usual width/size of five.
            ["beam"] => Ok(System::Beam { width: 5 }),
            ["beam-rescore"] => Ok(System::Rescore { width: 5, n: 5, weight: 0.3 }),
            ["fusion"] => Ok(System::Fusion { width: 5, weight: 0.3 }),
            ["beam", w] => {
                let width = w.parse().map_err(|_| unknown())?;
                Ok(System::Beam { width })
            }
            ["rescore", w, n] | ["rescore", w, n, _] => {
                let width = w.parse().map_err(|_| unknown())?;
                let n = n.parse().map_err(|_| unknown())?;
                let weight = match parts.get(3) {
                    Some(t) => t.parse().map_err(|_| unknown())?,
                    None => 0.3,
                };
                Ok(System::Rescore { width, n, weight })
            }
            ["fusion", w] | ["fusion", w, _] => {
                let width = w.parse().map_err(|_| unknown())?;
                let weight = match parts.get(2) {
                    Some(t) => t.parse().map_err(|_| unknown())?,
                    None => 0.3,
                };
                Ok(System::Fusion { width, weight })
            }
            _ => Err(unknown()),
        }
    }
}

/// Preloaded models and correction settings shared by all systems.
/// Loading happens before any timing, so benchmarks measure decoding only.
pub struct Pipelines<'a> {
    pub vocab: &'a Vocab,
    pub ngram: Option<&'a NgramLm>,
    pub mlm: Option<&'a PcMlmModel>,
    pub pcmlm: Option<&'a PcMlmModel>,
    pub del_pcmlm: Option<&'a PcMlmModel>,
    pub beta: f64,
    pub alpha: f64,
}

impl<'a> Pipelines<'a> {
    pub fn new(vocab: &'a Vocab) -> Self {
        let correction = CorrectionConfig::default();
        Pipelines {
            vocab,
            ngram: None,
            mlm: None,
            pcmlm: None,
            del_pcmlm: None,
            beta: correction.beta,
            alpha: correction.alpha,
        }
    }

    fn ngram(&self, system: &System) -> Result<&'a NgramLm, SimError> {
        self.ngram.ok_or_else(|| SimError::MissingModel {
            system: system.to_string(),
            model: "n-gram",
        })
    }

    fn masked_model(&self, system: &System, kind: ModelKind) -> Result<&'a PcMlmModel, SimError> {
        let (slot, name) = match kind {
            ModelKind::Mlm => (self.mlm, "masked LM"),
            ModelKind::Pcmlm => (self.pcmlm, "phone-conditioned masked LM"),
            ModelKind::DelPcmlm => (self.del_pcmlm, "deletable phone-conditioned masked LM"),
        };
        slot.ok_or_else(|| SimError::MissingModel { system: system.to_string(), model: name })
    }
}

/// Runs one system on one utterance, returning the output tokens and the
/// wall time of the decoding work itself.
pub fn run_system(
    system: &System,
    utt: &SimUtterance,
    p: &Pipelines,
) -> Result<(Vec<TokenId>, Duration), SimError> {
    match *system {
        System::Greedy => {
            let (_, hyp) = greedy_decode(&utt.post);
            Ok((hyp.tokens, hyp.wall))
        }
        System::Ec(kind) => {
            let model = p.masked_model(system, kind)?;
            let config = CorrectionConfig {
                beta: p.beta,
                alpha: p.alpha,
                deletable: kind == ModelKind::DelPcmlm,
            };
            let result = match kind {
                ModelKind::Mlm => correct_pipeline(
                    &utt.post,
                    &utt.phone_hyp,
                    &MlmScorer { model },
                    &config,
                    p.vocab,
                )?,
                ModelKind::Pcmlm | ModelKind::DelPcmlm => correct_pipeline(
                    &utt.post,
                    &utt.phone_hyp,
                    &PcMlmScorer { model },
                    &config,
                    p.vocab,
                )?,
            };
            Ok((result.tokens, result.timings.total))
        }
        System::Beam { width } => {
            let hyps = prefix_beam_search(&utt.post, width, None, p.vocab)?;
            let best = hyps.into_iter().next().expect("beam output is never empty");
            Ok((best.tokens, best.wall))
        }
        System::Rescore { width, n, weight } => {
            let lm = p.ngram(system)?;
            let hyps = prefix_beam_search(&utt.post, width, None, p.vocab)?;
            let search_wall = hyps[0].wall;
            let top = &hyps[..n.min(hyps.len())];
            let start = Instant::now();
            let out = rescore_nbest(top, &RescoreLm::Ar(lm), weight)?;
            Ok((out.best.tokens, search_wall + start.elapsed()))
        }
        System::Fusion { width, weight } => {
            let lm = p.ngram(system)?;
            let hyps =
                prefix_beam_search(&utt.post, width, Some((lm as &dyn FusionLm, weight)), p.vocab)?;
            let best = hyps.into_iter().next().expect("beam output is never empty");
            Ok((best.tokens, best.wall))
        }
    }
}

/// Accuracy plus timing for one system over a corpus.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub system: String,
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_ref: usize,
    /// Mean over the timed runs of total wall / total audio.
    pub rtf: f64,
    pub run_rtfs: Vec<f64>,
    pub total_audio_sec: f64,
    pub n_utterances: usize,
}

/// Evaluates a system: one untimed warm-up pass supplies the outputs for
/// WER, then `runs` timed passes give the real-time factor (batch size 1).
pub fn bench_rtf(
    utts: &[SimUtterance],
    system: &System,
    p: &Pipelines,
    runs: usize,
) -> Result<EvalReport, SimError> {
    if utts.is_empty() {
        return Err(SimError::NoUtterances);
    }
    if runs == 0 {
        return Err(SimError::BadConfig("bench needs at least one run".into()));
    }

    let mut pool = CorpusWer::default();
    for utt in utts {
        let (tokens, _) = run_system(system, utt, p)?;
        pool.add(&wer(&utt.reference, &tokens));
    }

    let total_audio: f64 = utts.iter().map(|u| u.post.audio_sec()).sum();
    let mut run_rtfs = Vec::with_capacity(runs);
    for _ in 0..runs {
        let mut wall = Duration::ZERO;
        for utt in utts {
            wall += run_system(system, utt, p)?.1;
        }
        run_rtfs.push(wall.as_secs_f64() / total_audio);
    }
    let rtf = run_rtfs.iter().sum::<f64>() / runs as f64;

    Ok(EvalReport {
        system: system.to_string(),
        wer: pool.wer(),
        substitutions: pool.substitutions,
        deletions: pool.deletions,
        insertions: pool.insertions,
        n_ref: pool.n_ref,
        rtf,
        run_rtfs,
        total_audio_sec: total_audio,
        n_utterances: utts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{Corpus, Lexicon};
    use crate::lm::{train_ngram, train_pcmlm, NgramConfig, PcMlmConfig};
    use crate::sim::{simulate, SimConfig};

    const LEX: &str = "\
cat\tk ae t
bat\tb ae t
dog\td ao g
sun\ts ah n
";

    struct Fixture {
        utts: Vec<SimUtterance>,
        vocab: Vocab,
        ngram: NgramLm,
        pcmlm: PcMlmModel,
    }

    fn fixture() -> Fixture {
        let corpus = Corpus::parse("cat dog\nsun bat\ndog sun cat\n").unwrap();
        let vocab = Vocab::from_corpus(&corpus).unwrap();
        let lex = Lexicon::parse(LEX).unwrap();
        let prons = lex.pron_table(&vocab).unwrap();
        let config = SimConfig { sub_rate: 0.4, seed: 13, ..SimConfig::default() };
        let utts = simulate(&corpus, &vocab, &prons, &config).unwrap();
        let ngram = train_ngram(&corpus, &vocab, NgramConfig::default()).unwrap();
        let pcmlm = train_pcmlm(
            &corpus,
            &vocab,
            &lex,
            PcMlmConfig { passes: 10, ..PcMlmConfig::default() },
        )
        .unwrap();
        Fixture { utts, vocab, ngram, pcmlm }
    }

    #[test]
    fn system_names_round_trip() {
        for name in
            ["greedy", "ec-mlm", "ec-pcmlm", "ec-del-pcmlm", "beam:5", "rescore:5:5:0.3", "fusion:5:0.3"]
        {
            let system: System = name.parse().unwrap();
            assert_eq!(system.to_string(), name);
        }
        assert_eq!(
            "rescore:4:2".parse::<System>().unwrap(),
            System::Rescore { width: 4, n: 2, weight: 0.3 }
        );
        // Short aliases expand to the default width/size of five.
        assert_eq!("ec-del".parse::<System>().unwrap(), System::Ec(ModelKind::DelPcmlm));
        assert_eq!("beam".parse::<System>().unwrap(), System::Beam { width: 5 });
        assert_eq!(
            "beam-rescore".parse::<System>().unwrap(),
            System::Rescore { width: 5, n: 5, weight: 0.3 }
        );
        assert_eq!("fusion".parse::<System>().unwrap(), System::Fusion { width: 5, weight: 0.3 });
        assert!("warp".parse::<System>().is_err());
        assert!("beam:x".parse::<System>().is_err());
        assert!("rescore".parse::<System>().is_err());
    }

    #[test]
    fn all_runnable_systems_produce_reports() {
        let f = fixture();
        let mut p = Pipelines::new(&f.vocab);
        p.ngram = Some(&f.ngram);
        p.pcmlm = Some(&f.pcmlm);
        for name in ["greedy", "ec-pcmlm", "beam:3", "rescore:3:3:0.3", "fusion:3:0.3"] {
            let system: System = name.parse().unwrap();
            let report = bench_rtf(&f.utts, &system, &p, 2).unwrap();
            assert_eq!(report.system, name);
            assert_eq!(report.run_rtfs.len(), 2);
            assert!(report.rtf > 0.0);
            assert!(report.total_audio_sec > 0.0);
            assert!(report.wer.is_finite());
        }
    }

    #[test]
    fn missing_models_are_reported() {
        let f = fixture();
        let p = Pipelines::new(&f.vocab);
        let err = run_system(&System::Fusion { width: 3, weight: 0.3 }, &f.utts[0], &p);
        assert!(matches!(err, Err(SimError::MissingModel { model: "n-gram", .. })));
        let err = run_system(&System::Ec(ModelKind::Mlm), &f.utts[0], &p);
        assert!(matches!(err, Err(SimError::MissingModel { .. })));
    }

    #[test]
    fn beam_search_agrees_with_greedy_on_peaked_grids() {
        // Simulated grids put the bulk of each frame on one symbol, so the
        // highest-mass sequence is the greedy collapse.
        let f = fixture();
        let p = Pipelines::new(&f.vocab);
        for utt in &f.utts {
            let (greedy, _) = run_system(&System::Greedy, utt, &p).unwrap();
            let (beam, _) = run_system(&System::Beam { width: 8 }, utt, &p).unwrap();
            assert_eq!(greedy, beam, "{}", utt.id);
        }
    }

    #[test]
    fn correction_with_oracle_strength_model_beats_greedy() {
        let f = fixture();
        let mut p = Pipelines::new(&f.vocab);
        p.pcmlm = Some(&f.pcmlm);
        let greedy = bench_rtf(&f.utts, &System::Greedy, &p, 1).unwrap();
        let ec = bench_rtf(&f.utts, &System::Ec(ModelKind::Pcmlm), &p, 1).unwrap();
        assert!(
            ec.wer <= greedy.wer,
            "correction must not hurt here: {} vs {}",
            ec.wer,
            greedy.wer
        );
    }
}
