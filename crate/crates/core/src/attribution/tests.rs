// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;

use super::*;
use crate::model::{predict, HeadSelection, InitOptions, ModelConfig, Prediction};

fn toy(layers: usize, seed: u64) -> ModelSnapshot {
    let config = ModelConfig::new(layers, 2, 8, 10, 9, 6, 3).unwrap();
    ModelSnapshot::random(config, HeadSelection::all(), seed, InitOptions { std: 0.5, random_biases: true }).unwrap()
}

fn seq(ids: &[usize]) -> TokenSequence {
    TokenSequence::new(ids.to_vec(), []).unwrap()
}

fn request(method: Method, task: Task) -> AttributionRequest {
    AttributionRequest::new(method, task)
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert_eq!("ig".parse::<Method>().unwrap(), Method::IntegratedGradients);
    assert_eq!("grad-x-input".parse::<Method>().unwrap(), Method::GradXInput);
    assert!("saliency".parse::<Method>().is_err());
}

#[test]
fn l2norm_matches_embedding_norms() {
    let m = toy(2, 1);
    let s = seq(&[0, 4, 2, 7]);
    let r = attribute(&m, &s, &request(Method::L2norm, Task::Classification)).unwrap();
    let x0 = m.embed(&s).unwrap();
    for (i, score) in r.scores.iter().enumerate() {
        let naive = x0.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((score - naive).abs() < 1e-14);
    }
    assert!(!r.signed);
}

#[test]
fn logat_classification_is_head_row_on_each_token() {
    let m = toy(2, 2);
    let s = seq(&[0, 3, 5, 1]);
    let trace = encode(&m, &s).unwrap();
    let head = m.heads.classification.as_ref().unwrap();
    for layer in 0..=2 {
        let r = attr_logat_classification(&m, &trace, 2, layer).unwrap();
        let reps = trace.representation(layer).unwrap();
        for i in 0..s.len() {
            let naive: f64 = head.weight.row(2).iter().zip(reps.row(i)).map(|(w, x)| w * x).sum::<f64>() + head.bias[2];
            assert!((r.scores[i] - naive).abs() < 1e-12);
        }
        assert!(r.signed);
    }
    // the CLS entry at the last layer is the model's own logit
    let pred = predict_from_trace(&m, &trace, &s, Task::Classification).unwrap();
    let Prediction::Class { logits, .. } = pred else { unreachable!() };
    let r = attr_logat_classification(&m, &trace, 1, 2).unwrap();
    assert_eq!(r.scores[0], logits[1]);
    assert!(attr_logat_classification(&m, &trace, 3, 2).is_err());
    assert!(attr_logat_classification(&m, &trace, 0, 3).is_err());
}

#[test]
fn logat_regression_is_zero_at_final_cls() {
    let m = toy(1, 3);
    let s = seq(&[0, 2, 8]);
    let trace = encode(&m, &s).unwrap();
    let r = attr_logat_regression(&m, &trace, 1).unwrap();
    assert_eq!(r.scores[0], 0.0);
    assert!(r.scores.iter().all(|&v| v >= 0.0));
    let head = m.heads.regression.as_ref().unwrap();
    let reference = linalg::dot(&head.weight, trace.final_output().row(0)) + head.bias;
    let x0 = trace.representation(0).unwrap();
    let r0 = attr_logat_regression(&m, &trace, 0).unwrap();
    for i in 0..3 {
        let out = linalg::dot(&head.weight, x0.row(i)) + head.bias;
        assert!((r0.scores[i] - (out - reference).abs()).abs() < 1e-12);
    }
}

#[test]
fn logat_lm_reads_any_vocabulary_entry() {
    let m = toy(1, 4);
    let s = TokenSequence::new(vec![0, 3, 1, 6], []).unwrap().with_mask_position(2).unwrap();
    let trace = encode(&m, &s).unwrap();
    let head = m.heads.language_model.as_ref().unwrap();
    for token in [0, 4, 8] {
        let r = attr_logat_lm(&m, &trace, token, 1).unwrap();
        for i in 0..s.len() {
            let naive = linalg::dot(head.unembedding.row(token), trace.final_output().row(i)) + head.bias[token];
            assert!((r.scores[i] - naive).abs() < 1e-12);
        }
    }
    assert!(matches!(attr_logat_lm(&m, &trace, 9, 1), Err(NxlError::Vocabulary { .. })));
}

#[test]
fn dispatcher_defaults_to_prediction_and_last_layer() {
    let m = toy(2, 5);
    let s = seq(&[0, 6, 2, 2, 7]);
    let pred = predict(&m, &s, Task::Classification).unwrap().label().unwrap();
    let r = attribute(&m, &s, &request(Method::Logat, Task::Classification)).unwrap();
    assert_eq!(r.target_label, Some(pred));
    assert_eq!(r.layer, Some(2));

    let mut req = request(Method::Normxlogit, Task::Classification);
    req.target_label = Some((pred + 1) % 3);
    req.layer = Some(1);
    let r = attribute(&m, &s, &req).unwrap();
    assert_eq!(r.target_label, Some((pred + 1) % 3));
    assert_eq!(r.layer, Some(1));

    req.layer = Some(3);
    assert!(matches!(attribute(&m, &s, &req), Err(NxlError::Index(_))));
}

#[test]
fn masked_lm_without_mask_is_a_protocol_error() {
    let m = toy(1, 6);
    let s = seq(&[0, 3, 4]);
    for method in [Method::Logat, Method::GradNorm] {
        assert!(matches!(attribute(&m, &s, &request(method, Task::MaskedLm)), Err(NxlError::Protocol(_))));
    }
}

#[test]
fn missing_head_is_reported() {
    let config = ModelConfig::new(1, 1, 4, 4, 6, 4, 2).unwrap();
    let m = ModelSnapshot::random(config, HeadSelection::only(Task::Regression), 0, InitOptions::default()).unwrap();
    let s = seq(&[0, 1, 2]);
    assert!(matches!(
        attribute(&m, &s, &request(Method::Logat, Task::Classification)),
        Err(NxlError::MissingHead(_))
    ));
    assert!(attribute(&m, &s, &request(Method::Logat, Task::Regression)).is_ok());
    // head-free methods do not need the task's head
    assert!(attribute(&m, &s, &request(Method::L2norm, Task::Classification)).is_ok());
    assert!(attribute(&m, &s, &request(Method::Random, Task::MaskedLm)).is_ok());
}

#[test]
fn gradient_methods_on_a_zero_layer_model() {
    // With no layers the classification logit is w_c . x_0 + b_c, so only
    // the CLS row has a gradient and everything else is exact.
    let m = toy(0, 7);
    let s = seq(&[0, 5, 3]);
    let x0 = m.embed(&s).unwrap();
    let w = m.heads.classification.as_ref().unwrap().weight.row(1).to_vec();
    let mut req = request(Method::GradNorm, Task::Classification);
    req.target_label = Some(1);
    let g = attribute(&m, &s, &req).unwrap();
    assert!((g.scores[0] - w.iter().map(|v| v.abs()).sum::<f64>()).abs() < 1e-14);
    assert_eq!(&g.scores[1..], &[0.0, 0.0]);

    req.method = Method::GradXInput;
    let gxi = attribute(&m, &s, &req).unwrap();
    let want: f64 = w.iter().zip(x0.row(0)).map(|(a, b)| (a * b).abs()).sum();
    assert!((gxi.scores[0] - want).abs() < 1e-14);

    req.method = Method::IntegratedGradients;
    req.params.ig_baseline = IgBaseline::AllZero;
    req.params.ig_steps = 7;
    let ig = attribute(&m, &s, &req).unwrap();
    for (a, b) in ig.scores.iter().zip(&gxi.scores) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn probability_objective_differs_from_logit() {
    let m = toy(1, 8);
    let s = seq(&[0, 2, 4, 6]);
    let mut req = request(Method::GradNorm, Task::Classification);
    let logit = attribute(&m, &s, &req).unwrap();
    req.params.objective = GradientObjective::Probability;
    let prob = attribute(&m, &s, &req).unwrap();
    assert_ne!(logit.scores, prob.scores);
}

#[test]
fn random_is_a_seeded_scaled_permutation() {
    let s = seq(&[0, 1, 2, 3, 4, 5, 6]);
    let a = attr_random(&s, 42);
    let b = attr_random(&s, 42);
    let c = attr_random(&s, 43);
    assert_eq!(a, b);
    assert_ne!(a.scores, c.scores);
    let mut ranks: Vec<usize> = a.scores.iter().map(|v| (v * 7.0).round() as usize).collect();
    ranks.sort_unstable();
    assert_eq!(ranks, (1..=7).collect::<Vec<_>>());
    assert_eq!(a.seed, Some(42));
}

#[test]
fn rank_tokens_breaks_ties_low() {
    let r = AttributionResult::unsigned(vec![0.3, 0.1, 0.5, 0.1], Method::Random);
    assert_eq!(rank_tokens(&r, &[0, 1, 2, 3], RankOrder::Signed).unwrap(), vec![2, 0, 1, 3]);
    assert_eq!(rank_tokens(&r, &[3, 1], RankOrder::Signed).unwrap(), vec![1, 3]);
    let signed = AttributionResult { signed: true, ..AttributionResult::unsigned(vec![-2.0, 1.0, 0.5], Method::Logat) };
    assert_eq!(rank_tokens(&signed, &[0, 1, 2], RankOrder::Signed).unwrap(), vec![1, 2, 0]);
    assert_eq!(rank_tokens(&signed, &[0, 1, 2], RankOrder::Absolute).unwrap(), vec![0, 1, 2]);
    assert!(matches!(rank_tokens(&r, &[], RankOrder::Signed), Err(NxlError::Protocol(_))));
    assert!(matches!(rank_tokens(&r, &[4], RankOrder::Signed), Err(NxlError::Index(_))));
}

#[test]
fn every_method_returns_one_finite_score_per_token() {
    let m = toy(2, 9);
    let s = TokenSequence::new(vec![0, 3, 1, 6, 2], []).unwrap().with_mask_position(2).unwrap();
    for task in [Task::Classification, Task::Regression, Task::MaskedLm] {
        for method in Method::ALL {
            let mut req = request(method, task);
            req.params.ig_steps = 5;
            let r = attribute(&m, &s, &req).unwrap();
            assert_eq!(r.len(), s.len(), "{method} {task}");
            assert!(r.scores.iter().all(|v| v.is_finite()));
            assert_eq!(r.method, method);
            if !r.signed {
                assert!(r.scores.iter().all(|&v| v >= 0.0), "{method} {task}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normxlogit_factorizes(seed in 0u64..1000, ids in prop::collection::vec(0usize..9, 2..6), task_idx in 0usize..3, layer in 0usize..3) {
        let m = toy(2, seed);
        let s = TokenSequence::new(ids.clone(), []).unwrap().with_mask_position(ids.len() - 1).unwrap();
        let task = [Task::Classification, Task::Regression, Task::MaskedLm][task_idx];
        let trace = encode(&m, &s).unwrap();
        let mut req = request(Method::Normxlogit, task);
        req.layer = Some(layer);
        let nx = attribute_with_trace(&m, &trace, &s, &req).unwrap();
        req.method = Method::Logat;
        let logat = attribute_with_trace(&m, &trace, &s, &req).unwrap();
        let norms = attr_l2norm(&trace);
        prop_assert_eq!(nx.target_label, logat.target_label);
        for i in 0..s.len() {
            prop_assert!((nx.scores[i] - norms.scores[i] * logat.scores[i]).abs() <= 1e-12 * (1.0 + nx.scores[i].abs()));
        }
    }

    #[test]
    fn norm_aggregated_scores_are_nonnegative(seed in 0u64..1000, ids in prop::collection::vec(0usize..9, 1..6)) {
        let m = toy(1, seed);
        let s = TokenSequence::new(ids, []).unwrap();
        for method in [Method::L2norm, Method::GradNorm, Method::GradXInput, Method::IntegratedGradients, Method::Random] {
            let mut req = request(method, Task::Classification);
            req.params.ig_steps = 4;
            let r = attribute(&m, &s, &req).unwrap();
            prop_assert!(r.scores.iter().all(|&v| v >= 0.0));
        }
    }
}
