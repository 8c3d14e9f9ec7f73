//! Oracles shared by several test targets.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Every ordering of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Ten templates with distinct lengths or leading words; slots take numbers or ids.
pub const TEN_TEMPLATES: [&str; 10] = [
    "Receiving block <*> src: <*> dest: <*>",
    "PacketResponder <*> for block <*> terminating",
    "Received block <*> of size <*> from <*>",
    "Deleting block <*> file <*>",
    "Verification succeeded for <*>",
    "BLOCK* NameSystem.delete: <*> is added to invalidSet of <*>",
    "writeBlock <*> received exception <*>",
    "Starting thread to transfer block <*> to <*>",
    "Unexpected error trying to delete block <*> BlockInfo not found in volumeMap.",
    "PendingReplicationMonitor timed out block <*>",
];

/// A log line from `template` with every slot filled by a block id, an address or a number.
pub fn fill(template: &str, r: &mut ChaCha8Rng) -> String {
    template
        .split(' ')
        .map(|t| match t {
            "<*>" => match r.gen_range(0..3) {
                0 => format!("blk_{}", r.gen_range(-9_000_000i64..9_000_000)),
                1 => format!("10.250.{}.{}:{}", r.gen_range(0..255), r.gen_range(0..255), r.gen_range(1000..60000)),
                _ => r.gen_range(0..100_000).to_string(),
            },
            lit => lit.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Per-class F1 from an explicit confusion matrix.
pub fn f1_per_class(preds: &[usize], labels: &[usize], classes: usize) -> Vec<f64> {
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        m[y][p] += 1;
    }
    (0..classes)
        .map(|c| {
            let tp = m[c][c] as f64;
            let fp = (0..classes).filter(|&y| y != c).map(|y| m[y][c]).sum::<usize>() as f64;
            let fneg = (0..classes).filter(|&p| p != c).map(|p| m[c][p]).sum::<usize>() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fneg)
            }
        })
        .collect()
}

/// First index of the largest score.
pub fn first_max(s: &[f64]) -> usize {
    (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b })
}

/// Whether the true class is among the `k` best scores, ties counted in its favour.
pub fn in_top_k(s: &[f64], y: usize, k: usize) -> bool {
    s.iter().filter(|&&v| v > s[y]).count() < k
}
