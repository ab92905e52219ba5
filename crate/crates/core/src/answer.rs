//! Similarity scoring of candidate answers against the pooled representation.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MistError, Result};
use crate::features::AnswerBank;
use crate::numerics::{argmax, cross_entropy, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub correct: Option<bool>,
}

/// `1 × A` scores of a `1 × D` representation against `A × D` answers.
/// Cosine mode normalises both sides first.
pub fn score_answers_graph(g: &mut Graph, x_o: Var, answers: Var, cosine: bool) -> Result<Var> {
    if g.shape(x_o).1 != g.shape(answers).1 {
        return Err(shape_err(
            "score_answers",
            format!("representation {:?} vs answers {:?}", g.shape(x_o), g.shape(answers)),
        ));
    }
    if cosine {
        let x = g.normalize_rows(x_o)?;
        let a = g.normalize_rows(answers)?;
        g.matmul_nt(x, a)
    } else {
        g.matmul_nt(x_o, answers)
    }
}

pub fn score_answers(x_o: &Tensor, bank: &AnswerBank, cosine: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x_o.clone().reshape(vec![1, x_o.numel()])?);
    let a = g.constant(bank.a.clone());
    let s = score_answers_graph(&mut g, x, a, cosine)?;
    Ok(Tensor::vector(g.value(s).data().to_vec()))
}

pub fn qa_loss(scores: &Tensor, label: usize) -> Result<f64> {
    cross_entropy(scores, label)
}

pub fn predict(scores: &Tensor, label: Option<usize>) -> Result<Prediction> {
    let predicted = argmax(scores.data()).ok_or_else(|| MistError::Invalid("empty answer bank".into()))?;
    Ok(Prediction {
        scores: scores.data().to_vec(),
        predicted,
        correct: label.map(|l| l == predicted),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(rows: &[Vec<f64>]) -> AnswerBank {
        AnswerBank::indexed(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn eye(n: usize) -> AnswerBank {
        bank(&(0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect::<Vec<_>>())
    }

    #[test]
    fn orthonormal_row_scores_one() {
        let b = eye(4);
        let s = score_answers(&Tensor::vector(b.a.row(2).to_vec()), &b, false).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(predict(&s, Some(2)).unwrap().correct, Some(true));
    }

    #[test]
    fn zero_representation_ties_to_first() {
        let s = score_answers(&Tensor::vector(vec![0.0; 4]), &eye(4), false).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert_eq!(predict(&s, None).unwrap().predicted, 0);
    }

    #[test]
    fn random_scores_match_dot_oracle() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| (0..3).map(|j| ((i * 3 + j) as f64 * 0.9).sin()).collect()).collect();
        let b = bank(&rows);
        let x = [0.3, -1.1, 0.7];
        let s = score_answers(&Tensor::vector(x.to_vec()), &b, false).unwrap();
        for (a, r) in rows.iter().enumerate() {
            let want: f64 = r.iter().zip(&x).map(|(p, q)| p * q).sum();
            assert!((s.data()[a] - want).abs() < 1e-14);
        }
        let c = score_answers(&Tensor::vector(x.to_vec()), &b, true).unwrap();
        let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, r) in rows.iter().enumerate() {
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let want: f64 = r.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() / (rn * xn);
            assert!((c.data()[a] - want).abs() < 1e-14);
        }
        assert!(score_answers(&Tensor::vector(vec![1.0; 2]), &b, false).is_err());
    }

    #[test]
    fn loss_limits() {
        assert!((qa_loss(&Tensor::vector(vec![0.5; 4]), 1).unwrap() - 4f64.ln()).abs() < 1e-12);
        // ln(1 + e⁻¹⁰) ≈ 4.5e-5 for two answers.
        assert!(qa_loss(&Tensor::vector(vec![0.0, 10.0]), 1).unwrap() < 1e-4);
        assert!(qa_loss(&Tensor::vector(vec![0.0; 3]), 3).is_err());
    }

    #[test]
    fn loss_gradient_wrt_representation_matches_differences() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..3).map(|j| ((i + 2 * j) as f64 * 0.7).cos()).collect()).collect();
        let b = bank(&rows);
        let x = vec![0.2, -0.4, 0.9];
        let label = 2;
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::matrix(1, 3, x.clone()).unwrap(), true);
        let av = g.constant(b.a.clone());
        let s = score_answers_graph(&mut g, xv, av, false).unwrap();
        let loss = g.cross_entropy(s, label).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(xv).unwrap().data().to_vec();
        let f = |x: &[f64]| qa_loss(&score_answers(&Tensor::vector(x.to_vec()), &b, false).unwrap(), label).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += h;
            m[i] -= h;
            let numeric = (f(&p) - f(&m)) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-6, "{rel}");
        }
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&Tensor::vector(vec![1.0, 3.0, 2.0]), None).unwrap().predicted, 1);
        assert_eq!(predict(&Tensor::vector(vec![2.0, 2.0]), None).unwrap().predicted, 0);
        let v = vec![0.3, -2.0, 5.5, 1.0, 5.4, 0.0];
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        assert_eq!(predict(&Tensor::vector(v), None).unwrap().predicted, best);
    }

    proptest! {
        #[test]
        fn predict_invariant_to_shift_and_scale(
            v in proptest::collection::vec(-5.0f64..5.0, 1..8),
            shift in -10.0f64..10.0,
            scale in 0.01f64..10.0,
        ) {
            let a = predict(&Tensor::vector(v.clone()), None).unwrap().predicted;
            let moved: Vec<f64> = v.iter().map(|x| x * scale + shift).collect();
            let b = predict(&Tensor::vector(moved.clone()), None).unwrap().predicted;
            // Affine rounding can merge near-ties; only distinct maxima must agree.
            let top = moved[b];
            prop_assert!(a == b || (moved[a] - top).abs() < 1e-9);
        }

        #[test]
        fn loss_nonnegative(v in proptest::collection::vec(-20.0f64..20.0, 2..8), label in 0usize..8) {
            let label = label % v.len();
            prop_assert!(qa_loss(&Tensor::vector(v), label).unwrap() >= 0.0);
        }
    }
}
