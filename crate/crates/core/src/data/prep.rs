//! Corpus preparation: sessionization, milestone windows, purchase-history
//! sampling and train/dev/test splitting.

use std::collections::HashMap;

use chrono::DateTime;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::object::{ObjectSequence, StructuredObject};
use crate::error::{Error, Result};

/// Seconds since the epoch from an RFC 3339 timestamp or a plain number.
pub fn parse_timestamp(s: &str) -> Result<f64> {
    if let Ok(v) = s.trim().parse::<f64>() {
        return Ok(v);
    }
    DateTime::parse_from_rfc3339(s.trim())
        .map(|d| d.timestamp() as f64 + f64::from(d.timestamp_subsec_millis()) / 1000.0)
        .map_err(|e| Error::format(None, format!("bad timestamp `{s}`: {e}")))
}

/// Splits a time-sorted event stream wherever two consecutive events are
/// more than `gap_minutes` apart. Session ids are `{id}-s{n}`.
pub fn sessionize(
    events: &ObjectSequence,
    time_key: &str,
    gap_minutes: f64,
) -> Result<Vec<ObjectSequence>> {
    let times = events
        .objects
        .iter()
        .map(|o| {
            o.get(time_key)
                .ok_or_else(|| Error::Key(time_key.to_string()))
                .and_then(parse_timestamp)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = times.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::Contract(format!(
            "events of `{}` are not time-sorted at index {}",
            events.id,
            i + 1
        )));
    }
    let gap = gap_minutes * 60.0;
    let mut sessions = Vec::new();
    let mut cur: Vec<StructuredObject> = Vec::new();
    for (i, o) in events.objects.iter().enumerate() {
        if i > 0 && times[i] - times[i - 1] > gap {
            sessions.push(std::mem::take(&mut cur));
        }
        cur.push(o.clone());
    }
    if !cur.is_empty() {
        sessions.push(cur);
    }
    Ok(sessions
        .into_iter()
        .enumerate()
        .map(|(n, objs)| ObjectSequence::new(format!("{}-s{n}", events.id), objs))
        .collect())
}

/// Which events count as milestones: `key` taking one of `classes`.
/// Class index 0 is "no milestone"; `classes[i]` is class `i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilestoneSpec {
    pub key: String,
    pub classes: Vec<String>,
    pub history: usize,
    pub horizon: usize,
    /// Distance between consecutive window ends.
    pub stride: usize,
    /// Probability of keeping a window whose label is "no milestone".
    pub negative_rate: f64,
}

impl Default for MilestoneSpec {
    fn default() -> Self {
        MilestoneSpec {
            key: "event".into(),
            classes: vec!["revenue".into(), "support".into()],
            history: 300,
            horizon: 50,
            stride: 50,
            negative_rate: 1.0,
        }
    }
}

impl MilestoneSpec {
    pub fn class_of(&self, o: &StructuredObject) -> Option<usize> {
        let v = o.get(&self.key)?;
        self.classes.iter().position(|c| c == v).map(|i| i + 1)
    }
}

/// The window ending before step `t`: input is steps `[t-history, t)`, the
/// label is the first milestone class in `[t, t+horizon)` or 0.
pub fn window_for_milestone(
    session: &ObjectSequence,
    t: usize,
    spec: &MilestoneSpec,
) -> Result<ObjectSequence> {
    if session.len() < spec.history + 1 {
        return Err(Error::Contract(format!(
            "session `{}` has {} steps, need at least {}",
            session.id,
            session.len(),
            spec.history + 1
        )));
    }
    if t < spec.history || t >= session.len() {
        return Err(Error::Index {
            op: "window_for_milestone",
            index: t,
            bound: session.len(),
        });
    }
    let end = (t + spec.horizon).min(session.len());
    let label = session.objects[t..end]
        .iter()
        .find_map(|o| spec.class_of(o))
        .unwrap_or(0);
    Ok(ObjectSequence {
        id: format!("{}-t{t}", session.id),
        label: Some(label.to_string()),
        objects: session.objects[t - spec.history..t].to_vec(),
    })
}

/// Why a session produced no windows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

/// Windows at every `stride` steps, negatives kept at `negative_rate`.
pub fn milestone_windows<R: Rng + ?Sized>(
    sessions: &[ObjectSequence],
    spec: &MilestoneSpec,
    rng: &mut R,
) -> Result<(Vec<ObjectSequence>, Vec<Skipped>)> {
    if spec.stride == 0 {
        return Err(Error::Config("milestone stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for s in sessions {
        if s.len() < spec.history + 1 {
            skipped.push(Skipped {
                id: s.id.clone(),
                reason: format!("{} steps < history {} + 1", s.len(), spec.history),
            });
            continue;
        }
        let mut t = spec.history;
        while t < s.len() {
            let w = window_for_milestone(s, t, spec)?;
            if w.label.as_deref() != Some("0") || rng.gen::<f64>() < spec.negative_rate {
                out.push(w);
            }
            t += spec.stride;
        }
    }
    Ok((out, skipped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstacartSpec {
    pub product_key: String,
    pub min_hist: usize,
    pub max_hist: usize,
    pub min_target_count: usize,
}

impl Default for InstacartSpec {
    fn default() -> Self {
        InstacartSpec {
            product_key: "product".into(),
            min_hist: 50,
            max_hist: 200,
            min_target_count: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SamplingStats {
    pub users: usize,
    pub emitted: usize,
    pub short_history: usize,
    pub rare_target: usize,
}

/// One instance per user: the last purchase is the target, preceded by a
/// history window of uniform size in `[min_hist, min(max_hist, available)]`.
/// Targets bought fewer than `min_target_count` times corpus-wide are dropped.
pub fn sample_instacart_style<R: Rng + ?Sized>(
    users: &[ObjectSequence],
    spec: &InstacartSpec,
    rng: &mut R,
) -> Result<(Vec<ObjectSequence>, SamplingStats)> {
    if spec.min_hist == 0 || spec.min_hist > spec.max_hist {
        return Err(Error::Config(format!(
            "need 1 <= min_hist <= max_hist, got {}..{}",
            spec.min_hist, spec.max_hist
        )));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for u in users {
        for o in &u.objects {
            if let Some(p) = o.get(&spec.product_key) {
                *freq.entry(p).or_default() += 1;
            }
        }
    }
    let mut stats = SamplingStats {
        users: users.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for u in users {
        let available = u.len().saturating_sub(1);
        if available < spec.min_hist {
            stats.short_history += 1;
            continue;
        }
        let target = u.objects[u.len() - 1]
            .get(&spec.product_key)
            .ok_or_else(|| Error::Key(spec.product_key.clone()))?;
        if freq[target] < spec.min_target_count {
            stats.rare_target += 1;
            continue;
        }
        let size = rng.gen_range(spec.min_hist..=spec.max_hist.min(available));
        out.push(ObjectSequence {
            id: u.id.clone(),
            label: Some(target.to_string()),
            objects: u.objects[available - size..available].to_vec(),
        });
        stats.emitted += 1;
    }
    Ok((out, stats))
}

/// Shuffles and cuts into train/dev/test by the given sizes (fractions
/// when all are below 1, counts otherwise).
pub fn split<R: Rng + ?Sized>(
    mut seqs: Vec<ObjectSequence>,
    sizes: [f64; 3],
    rng: &mut R,
) -> Result<[Vec<ObjectSequence>; 3]> {
    let n = seqs.len();
    let counts: Vec<usize> = if sizes.iter().all(|&s| s < 1.0) {
        let a = (sizes[0] * n as f64).round() as usize;
        let b = (sizes[1] * n as f64).round() as usize;
        vec![a, b, n.saturating_sub(a + b)]
    } else {
        sizes.iter().map(|&s| s as usize).collect()
    };
    if counts.iter().sum::<usize>() > n {
        return Err(Error::Config(format!("split sizes {counts:?} exceed corpus size {n}")));
    }
    seqs.shuffle(rng);
    let mut it = seqs.into_iter();
    let train = it.by_ref().take(counts[0]).collect();
    let dev = it.by_ref().take(counts[1]).collect();
    let test = it.take(counts[2]).collect();
    Ok([train, dev, test])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn timed(minutes: &[f64]) -> ObjectSequence {
        ObjectSequence::new(
            "u",
            minutes
                .iter()
                .map(|m| StructuredObject::new().with("ts", (m * 60.0).to_string()))
                .collect(),
        )
    }

    #[test]
    fn gaps_split_strictly_above_threshold() {
        let s = sessionize(&timed(&[0.0, 5.0, 25.0, 30.0]), "ts", 15.0).unwrap();
        assert_eq!(s.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![2, 2]);
        let s = sessionize(&timed(&[0.0, 15.0]), "ts", 15.0).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn unsorted_is_contract_error() {
        assert!(matches!(
            sessionize(&timed(&[0.0, 5.0, 1.0]), "ts", 15.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn rfc3339_timestamps() {
        let a = parse_timestamp("2020-01-01T00:00:00Z").unwrap();
        let b = parse_timestamp("2020-01-01T00:16:00+00:00").unwrap();
        assert_eq!(b - a, 960.0);
    }

    fn stream(len: usize, milestone_at: &[(usize, &str)]) -> ObjectSequence {
        let mut objs: Vec<_> = (0..len)
            .map(|_| StructuredObject::new().with("event", "view"))
            .collect();
        for (t, c) in milestone_at {
            objs[*t] = StructuredObject::new().with("event", *c);
        }
        ObjectSequence::new("s", objs)
    }

    #[test]
    fn horizon_boundary() {
        let spec = MilestoneSpec::default();
        let s = stream(400, &[(310, "support")]);
        assert_eq!(window_for_milestone(&s, 300, &spec).unwrap().label.as_deref(), Some("2"));
        let s = stream(400, &[(351, "support")]);
        let w = window_for_milestone(&s, 300, &spec).unwrap();
        assert_eq!(w.label.as_deref(), Some("0"));
        assert_eq!(w.len(), 300);
        let short = stream(300, &[]);
        assert!(window_for_milestone(&short, 300, &spec).is_err());
    }

    #[test]
    fn short_history_and_rare_target() {
        let user = |id: &str, n: usize, target: &str| {
            let mut objs: Vec<_> = (0..n)
                .map(|i| StructuredObject::new().with("product", format!("p{}", i % 7)))
                .collect();
            objs.push(StructuredObject::new().with("product", target));
            ObjectSequence::new(id, objs)
        };
        let users = vec![user("a", 30, "p1"), user("b", 80, "rare")];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, stats) = sample_instacart_style(&users, &InstacartSpec::default(), &mut rng).unwrap();
        assert!(out.is_empty());
        assert_eq!(stats.short_history, 1);
        assert_eq!(stats.rare_target, 1);
    }
}
