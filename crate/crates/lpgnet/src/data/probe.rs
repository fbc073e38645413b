//! Single-modality linear probe, used as an independent oracle on the
//! synthetic generator: it bounds how much class signal one modality
//! carries, with no dependency on the model or the tape.

use crate::data::Dialogue;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Audio,
}

pub fn modality_samples(dialogues: &[Dialogue], which: Modality) -> Vec<(Vec<f64>, usize)> {
    let mut out = Vec::new();
    for d in dialogues {
        for u in &d.utterances {
            let feat = match which {
                Modality::Text => u.text_feat.clone(),
                Modality::Audio => u.audio_feat.clone(),
            };
            out.push((feat, u.label as usize));
        }
    }
    out
}

/// Trains multinomial logistic regression by full-batch gradient descent
/// and returns test accuracy. Plain arrays only.
pub fn linear_probe_accuracy(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    classes: usize,
    steps: usize,
    lr: f64,
) -> f64 {
    assert!(!train.is_empty() && !test.is_empty());
    let dim = train[0].0.len();
    let mut w = vec![0.0; dim * classes];
    let mut b = vec![0.0; classes];
    let n = train.len() as f64;
    let mut logits = vec![0.0; classes];
    for _ in 0..steps {
        let mut gw = vec![0.0; dim * classes];
        let mut gb = vec![0.0; classes];
        for (x, y) in train {
            softmax_logits(x, &w, &b, &mut logits);
            for c in 0..classes {
                let err = logits[c] - if c == *y { 1.0 } else { 0.0 };
                gb[c] += err / n;
                for j in 0..dim {
                    gw[j * classes + c] += err * x[j] / n;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * gi;
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= lr * gi;
        }
    }
    let mut correct = 0usize;
    for (x, y) in test {
        softmax_logits(x, &w, &b, &mut logits);
        let pred = argmax(&logits);
        if pred == *y {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}

fn softmax_logits(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let classes = b.len();
    for c in 0..classes {
        out[c] = b[c];
    }
    for (j, &xj) in x.iter().enumerate() {
        for c in 0..classes {
            out[c] += xj * w[j * classes + c];
        }
    }
    let mx = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
