//! Routing-policy ablations: measure what the learned router buys by
//! swapping it for oracle, random, or fixed-expert routing on held-out
//! data while keeping every other weight identical.

use std::collections::HashMap;

use crate::decoder::{assemble, generate};
use crate::error::{Error, Result};
use crate::nn::cross_entropy;
use crate::rng::Rng;
use crate::router::{route_logits, select_expert, ExpertId};
use crate::synthdata::Sample;
use crate::vision::FeatureMap;

use super::{reduced_for, Checkpoint, Prepared};

/// How to pick the expert for each image during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// The trained router decides.
    Learned,
    /// The ground-truth domain label decides (upper bound).
    Oracle,
    /// Uniformly random expert, seeded for reproducibility.
    Random(u64),
    /// Every image goes to the same expert.
    Fixed(ExpertId),
}

impl Policy {
    /// Parse `learned`, `oracle`, `random` or `fixed:<i>`. `seed` feeds
    /// the random policy.
    pub fn parse(s: &str, seed: u64) -> Result<Policy> {
        match s {
            "learned" => Ok(Policy::Learned),
            "oracle" => Ok(Policy::Oracle),
            "random" => Ok(Policy::Random(seed)),
            other => {
                if let Some(rest) = other.strip_prefix("fixed:") {
                    let i: usize = rest.parse().map_err(|_| {
                        Error::Config(format!("fixed policy index {rest:?} is not a number"))
                    })?;
                    Ok(Policy::Fixed(ExpertId(i)))
                } else {
                    Err(Error::Config(format!(
                        "unknown routing policy {other:?} \
                         (expected learned, oracle, random or fixed:<i>)"
                    )))
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Policy::Learned => "learned".into(),
            Policy::Oracle => "oracle".into(),
            Policy::Random(_) => "random".into(),
            Policy::Fixed(e) => format!("fixed:{}", e.0),
        }
    }
}

/// Per-domain evaluation results under one policy.
#[derive(Debug, Clone)]
pub struct DomainEval {
    pub domain: usize,
    pub n: usize,
    /// Fraction of this domain's images sent to the matching expert.
    pub routing_accuracy: f64,
    /// Mean per-sample caption loss (teacher-forced).
    pub mean_lm_loss: f64,
    /// Fraction whose greedy decode reproduces the caption exactly.
    pub exact_match: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub policy: String,
    pub domains: Vec<DomainEval>,
    /// `confusion[label][expert]`: images of domain `label` dispatched to
    /// `expert`. Each row sums to that domain's sample count.
    pub confusion: Vec<Vec<usize>>,
    /// Post-reduction visual token count per expert.
    pub token_counts: Vec<usize>,
    /// Fraction of all images sent to the matching expert.
    pub overall_accuracy: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("policy={}\n", self.policy));
        s.push_str(&format!("overall_accuracy={:.6}\n", self.overall_accuracy));
        let counts: Vec<String> = self
            .token_counts
            .iter()
            .enumerate()
            .map(|(e, t)| format!("expert_{e}={t}"))
            .collect();
        s.push_str(&format!("token_counts {}\n", counts.join(" ")));
        for d in &self.domains {
            s.push_str(&format!(
                "domain={} n={} routing_accuracy={:.6} mean_lm_loss={:.6} exact_match={:.6}\n",
                d.domain, d.n, d.routing_accuracy, d.mean_lm_loss, d.exact_match
            ));
        }
        for (label, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("confusion label={label}: {}\n", cells.join(" ")));
        }
        s
    }

    /// The confusion matrix as CSV: one row per domain label.
    pub fn confusion_csv(&self) -> String {
        let experts = self.token_counts.len();
        let header: Vec<String> = (0..experts).map(|e| format!("expert_{e}")).collect();
        let mut s = format!("label,{}\n", header.join(","));
        for (label, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("{label},{}\n", cells.join(",")));
        }
        s
    }

    /// Mean lm loss across domains, weighted by sample counts.
    pub fn mean_lm_loss(&self) -> f64 {
        let total: usize = self.domains.iter().map(|d| d.n).sum();
        if total == 0 {
            return f64::NAN;
        }
        self.domains
            .iter()
            .map(|d| d.mean_lm_loss * d.n as f64)
            .sum::<f64>()
            / total as f64
    }
}

/// Teacher-forced caption loss and greedy exact-match for sample `i`
/// evaluated through expert `e`, regardless of what the router would pick.
fn eval_sample(
    ckpt: &Checkpoint,
    prep: &mut Prepared,
    samples: &[Sample],
    i: usize,
    e: usize,
) -> Result<(f64, bool)> {
    let fmap = reduced_for(&mut prep.reduced[i], &ckpt.encoders, &samples[i].image, e)?;
    let (tokens, _) = ckpt.adapters[e].forward(&fmap.tokens)?;
    let visual = FeatureMap::new(fmap.grid_h, fmap.grid_w, tokens);
    let target = &prep.targets[i];
    let seq = assemble(&visual, &[], target)?;
    let logits = ckpt.decoder.forward_logits(&seq)?;
    let t = seq.visual.rows();
    let mut loss = 0.0;
    let mut n = 0usize;
    for (p, &m) in seq.loss_mask.iter().enumerate() {
        if !m {
            continue;
        }
        loss += cross_entropy(logits.row(p - 1), seq.text_ids[p - t])?.0;
        n += 1;
    }
    let gen = generate(&ckpt.decoder, &visual, &[], target.len() + 4)?;
    let exact = gen.ids == *target;
    Ok((loss / n as f64, exact))
}

fn run_policy(
    ckpt: &Checkpoint,
    samples: &[Sample],
    prep: &mut Prepared,
    memo: &mut HashMap<(usize, usize), (f64, bool)>,
    policy: Policy,
) -> Result<EvalReport> {
    let experts = ckpt.encoders.len();
    let mut rng = match policy {
        Policy::Random(seed) => Some(Rng::new(seed).derive(7)),
        _ => None,
    };
    let mut confusion = vec![vec![0usize; experts]; experts];
    let mut n = vec![0usize; experts];
    let mut hits = vec![0usize; experts];
    let mut loss_sum = vec![0.0f64; experts];
    let mut exact_sum = vec![0usize; experts];
    for (i, s) in samples.iter().enumerate() {
        let expert = match policy {
            Policy::Learned => select_expert(&route_logits(&ckpt.router, &prep.pooled[i])?)?,
            Policy::Oracle => s.label,
            Policy::Random(_) => ExpertId(rng.as_mut().unwrap().below(experts)),
            Policy::Fixed(e) => {
                if e.0 >= experts {
                    return Err(Error::IndexOutOfRange {
                        what: "expert id",
                        index: e.0,
                        bound: experts,
                    });
                }
                e
            }
        };
        let label = s.label.0;
        confusion[label][expert.0] += 1;
        let key = (i, expert.0);
        let (loss, exact) = match memo.get(&key) {
            Some(&v) => v,
            None => {
                let v = eval_sample(ckpt, prep, samples, i, expert.0)?;
                memo.insert(key, v);
                v
            }
        };
        n[label] += 1;
        if expert.0 == label {
            hits[label] += 1;
        }
        loss_sum[label] += loss;
        exact_sum[label] += exact as usize;
    }
    let domains: Vec<DomainEval> = (0..experts)
        .filter(|&d| n[d] > 0)
        .map(|d| DomainEval {
            domain: d,
            n: n[d],
            routing_accuracy: hits[d] as f64 / n[d] as f64,
            mean_lm_loss: loss_sum[d] / n[d] as f64,
            exact_match: exact_sum[d] as f64 / n[d] as f64,
        })
        .collect();
    let total: usize = n.iter().sum();
    let overall = hits.iter().sum::<usize>() as f64 / total.max(1) as f64;
    let token_counts = ckpt
        .encoders
        .iter()
        .map(|e| e.spec.post_tokens())
        .collect();
    Ok(EvalReport {
        policy: policy.label(),
        domains,
        confusion,
        token_counts,
        overall_accuracy: overall,
    })
}

/// Evaluate several policies on the same samples. Feature maps and
/// per-(sample, expert) results are shared across policies, so e.g.
/// oracle after learned only pays for the routing disagreements.
pub fn ablate_many(
    ckpt: &Checkpoint,
    samples: &[Sample],
    policies: &[Policy],
) -> Result<Vec<EvalReport>> {
    if samples.is_empty() {
        return Err(Error::Config("ablate: empty sample set".into()));
    }
    let mut prep = Prepared::new(ckpt, samples)?;
    let mut memo: HashMap<(usize, usize), (f64, bool)> = HashMap::new();
    policies
        .iter()
        .map(|&p| run_policy(ckpt, samples, &mut prep, &mut memo, p))
        .collect()
}

pub fn ablate(ckpt: &Checkpoint, samples: &[Sample], policy: Policy) -> Result<EvalReport> {
    Ok(ablate_many(ckpt, samples, &[policy])?.pop().unwrap())
}

#[cfg(test)]
mod tests {
    use super::super::init_checkpoint;
    use super::*;
    use crate::profile::{Profile, ProfileId};
    use crate::synthdata::{gen_in_memory, Dataset, DatasetManifest};

    fn fixture(seed: u64) -> (Checkpoint, Dataset) {
        let mut profile = Profile::new(ProfileId::Desk);
        profile.prefit.steps = 4;
        profile.prefit.batch = 4;
        let manifest = DatasetManifest {
            train_per_class: 8,
            heldout_per_class: 4,
            ..DatasetManifest::desk_default(seed)
        };
        let data = gen_in_memory(&manifest);
        let ckpt = init_checkpoint(&profile, seed, &data.train, false).unwrap();
        (ckpt, data)
    }

    #[test]
    fn policy_parse_round_trips() {
        assert_eq!(Policy::parse("learned", 7).unwrap(), Policy::Learned);
        assert_eq!(Policy::parse("oracle", 7).unwrap(), Policy::Oracle);
        assert_eq!(Policy::parse("random", 7).unwrap(), Policy::Random(7));
        assert_eq!(
            Policy::parse("fixed:2", 7).unwrap(),
            Policy::Fixed(ExpertId(2))
        );
        assert!(Policy::parse("fixed:x", 7).is_err());
        assert!(Policy::parse("bogus", 7).is_err());
        assert_eq!(Policy::Fixed(ExpertId(1)).label(), "fixed:1");
    }

    #[test]
    fn oracle_confusion_is_diagonal() {
        let (ckpt, data) = fixture(31);
        let report = ablate(&ckpt, &data.heldout, Policy::Oracle).unwrap();
        assert_eq!(report.overall_accuracy, 1.0);
        for (label, row) in report.confusion.iter().enumerate() {
            for (expert, &count) in row.iter().enumerate() {
                if label == expert {
                    assert_eq!(count, 4);
                } else {
                    assert_eq!(count, 0);
                }
            }
        }
        for d in &report.domains {
            assert_eq!(d.routing_accuracy, 1.0);
            assert!(d.mean_lm_loss.is_finite());
        }
    }

    #[test]
    fn fixed_policy_routes_everything_to_one_column() {
        let (ckpt, data) = fixture(32);
        let report = ablate(&ckpt, &data.heldout, Policy::Fixed(ExpertId(1))).unwrap();
        for row in &report.confusion {
            assert_eq!(row[0], 0);
            assert_eq!(row[1], 4);
            assert_eq!(row[2], 0);
        }
        // Only domain 1 matched its expert.
        assert!((report.overall_accuracy - 1.0 / 3.0).abs() < 1e-12);
        let err = ablate(&ckpt, &data.heldout, Policy::Fixed(ExpertId(9))).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { .. }), "{err}");
    }

    #[test]
    fn confusion_rows_sum_to_the_domain_counts() {
        let (ckpt, data) = fixture(33);
        for policy in [
            Policy::Learned,
            Policy::Oracle,
            Policy::Random(5),
            Policy::Fixed(ExpertId(2)),
        ] {
            let report = ablate(&ckpt, &data.heldout, policy).unwrap();
            for (label, row) in report.confusion.iter().enumerate() {
                assert_eq!(
                    row.iter().sum::<usize>(),
                    4,
                    "policy {} label {label}",
                    report.policy
                );
            }
            for d in &report.domains {
                assert_eq!(d.n, 4);
            }
        }
    }

    #[test]
    fn desk_token_counts_are_uniform_after_reduction() {
        let (ckpt, data) = fixture(34);
        let report = ablate(&ckpt, &data.heldout, Policy::Oracle).unwrap();
        assert_eq!(report.token_counts, vec![16, 16, 16]);
    }

    #[test]
    fn random_policy_is_seed_reproducible() {
        let (ckpt, data) = fixture(35);
        let a = ablate(&ckpt, &data.heldout, Policy::Random(9)).unwrap();
        let b = ablate(&ckpt, &data.heldout, Policy::Random(9)).unwrap();
        assert_eq!(a.confusion, b.confusion);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn shared_evaluation_matches_isolated_runs() {
        let (ckpt, data) = fixture(36);
        let many = ablate_many(
            &ckpt,
            &data.heldout,
            &[Policy::Learned, Policy::Oracle, Policy::Fixed(ExpertId(0))],
        )
        .unwrap();
        let learned = ablate(&ckpt, &data.heldout, Policy::Learned).unwrap();
        let oracle = ablate(&ckpt, &data.heldout, Policy::Oracle).unwrap();
        let fixed0 = ablate(&ckpt, &data.heldout, Policy::Fixed(ExpertId(0))).unwrap();
        for (shared, isolated) in many.iter().zip([&learned, &oracle, &fixed0]) {
            assert_eq!(shared.to_text(), isolated.to_text());
            assert_eq!(shared.confusion_csv(), isolated.confusion_csv());
        }
    }

    #[test]
    fn report_text_carries_fixed_format_fields() {
        let (ckpt, data) = fixture(37);
        let report = ablate(&ckpt, &data.heldout, Policy::Oracle).unwrap();
        let text = report.to_text();
        assert!(text.starts_with("policy=oracle\n"), "{text}");
        assert!(text.contains("overall_accuracy=1.000000"), "{text}");
        assert!(text.contains("token_counts expert_0=16 expert_1=16 expert_2=16"));
        assert!(text.contains("domain=0 n=4 routing_accuracy=1.000000"));
        let csv = report.confusion_csv();
        assert!(csv.starts_with("label,expert_0,expert_1,expert_2\n"), "{csv}");
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn empty_sample_set_is_rejected() {
        let (ckpt, _) = fixture(38);
        let err = ablate(&ckpt, &[], Policy::Oracle).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
