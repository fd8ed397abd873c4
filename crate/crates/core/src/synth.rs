//! Labeled synthetic CAN traffic with injected DoS, fuzzy and spoofing
//! attacks.
//!
//! Background traffic is a set of periodic identifiers, each with its own
//! payload model. Attacks are injected on top and the merged timeline is
//! sorted by timestamp. Timestamps are rounded to whole microseconds, the
//! resolution of the public HCRL captures.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CanFrame, Label};

/// How one payload byte evolves across emissions of an identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ByteGen {
    Constant(u8),
    /// Increments by one (mod 256) on every emission, starting at 0.
    Counter,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdSpec {
    pub can_id: u32,
    /// Nominal period in seconds.
    pub period: f64,
    /// One generator per transmitted byte; its length is the frame's DLC.
    pub payload: Vec<ByteGen>,
    /// Offset of the first emission. Defaults to an even stagger of the
    /// identifiers across their period.
    #[serde(default)]
    pub phase: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficProfile {
    pub ids: Vec<IdSpec>,
    /// Emission delay, as a fraction of the period, drawn uniformly from `[0, jitter)`.
    #[serde(default)]
    pub jitter: f64,
    /// Seconds of traffic.
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Dos,
    Fuzzy,
    Spoof,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(default)]
    pub target_id: Option<u32>,
    /// Share of all emitted frames that are injected, in (0, 1).
    pub injected_fraction: f64,
    /// Spacing between consecutive injected frames, in seconds.
    pub inter_frame: f64,
    /// `(byte index, value)` pairs written into spoofed payloads.
    #[serde(default)]
    pub byte_overrides: Vec<(u8, u8)>,
    /// Number of attack bursts for DoS and fuzzy injection.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
}

fn default_episodes() -> usize {
    8
}

impl AttackSpec {
    pub fn new(kind: AttackKind, injected_fraction: f64, inter_frame: f64) -> Self {
        AttackSpec {
            kind,
            target_id: None,
            injected_fraction,
            inter_frame,
            byte_overrides: Vec::new(),
            episodes: default_episodes(),
        }
    }

    pub fn spoof(target_id: u32, overrides: &[(u8, u8)], injected_fraction: f64, inter_frame: f64) -> Self {
        AttackSpec {
            target_id: Some(target_id),
            byte_overrides: overrides.to_vec(),
            ..AttackSpec::new(AttackKind::Spoof, injected_fraction, inter_frame)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.injected_fraction > 0.0 && self.injected_fraction < 1.0) {
            return Err(Error::config("injected_fraction must lie in (0, 1)"));
        }
        if !(self.inter_frame > 0.0 && self.inter_frame.is_finite()) {
            return Err(Error::config("inter_frame must be positive"));
        }
        if self.byte_overrides.iter().any(|&(i, _)| i > 7) {
            return Err(Error::config("byte override index outside 0-7"));
        }
        if self.kind == AttackKind::Spoof && self.target_id.is_none() {
            return Err(Error::config("spoof attack requires target_id"));
        }
        if self.episodes == 0 {
            return Err(Error::config("episodes must be at least 1"));
        }
        Ok(())
    }
}

impl TrafficProfile {
    pub fn validate(&self) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::config("traffic profile has no identifiers"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::config("duration must be positive"));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::config("jitter must lie in [0, 0.5)"));
        }
        for spec in &self.ids {
            if !(spec.period > 0.0 && spec.period.is_finite()) {
                return Err(Error::config(format!("period of {:#x} must be positive", spec.can_id)));
            }
            if spec.payload.len() > 8 {
                return Err(Error::config(format!("{:#x} has more than 8 payload bytes", spec.can_id)));
            }
            if let Some(phase) = spec.phase {
                if !(phase >= 0.0) {
                    return Err(Error::config("phase must be non-negative"));
                }
            }
        }
        Ok(())
    }

    /// Nominal background frame count, `duration * sum(1 / period)`.
    pub fn expected_frames(&self) -> f64 {
        self.ids.iter().map(|s| self.duration / s.period).sum()
    }
}

/// Identifier set of the built-in spoofing scenario, as
/// `(id, payload)`. Every identifier runs at 100 Hz with staggered phases.
fn scenario_ids() -> Vec<IdSpec> {
    use ByteGen::{Constant as C, Counter as N, Random as R};
    let table: [(u32, [ByteGen; 8]); 10] = [
        (0x130, [C(0x05), C(0x80), N, C(0x00), R, C(0x7f), C(0x08), C(0x10)]),
        (0x153, [C(0x00), C(0x21), C(0x10), C(0xff), C(0x00), C(0xff), N, C(0x00)]),
        (0x18f, [C(0xfe), C(0x3b), C(0x00), C(0x00), C(0x00), C(0x3c), C(0x00), N]),
        (0x260, [C(0x19), C(0x21), C(0x22), C(0x30), C(0x08), C(0x8e), C(0x6d), R]),
        (0x2a0, [C(0x64), C(0x00), C(0x9a), C(0x1d), C(0x97), C(0x02), C(0xbd), N]),
        (0x329, [C(0x40), C(0xbb), C(0x7f), C(0x14), C(0x11), C(0x20), C(0x00), R]),
        (0x43f, [C(0x10), C(0x40), C(0x60), C(0xff), C(0x72), C(0x49), C(0x00), C(0x00)]),
        (0x490, [R, N, C(0x20), C(0x00), R, C(0x7f), C(0x10), C(0x00)]),
        (0x545, [C(0xd8), C(0x00), C(0x00), C(0x8b), C(0x00), C(0x00), C(0x00), N]),
        (0x5f0, [C(0x01), C(0x00), R, C(0x00), C(0x00), C(0x00), C(0x00), C(0x00)]),
    ];
    table
        .into_iter()
        .map(|(can_id, payload)| IdSpec { can_id, period: 0.01, payload: payload.to_vec(), phase: None })
        .collect()
}

impl SynthConfig {
    /// Spoofing scenario of roughly `total_frames` frames: ten periodic
    /// identifiers, with 8% of the stream made of copies of `0x490` whose
    /// first byte is forced to `0x03`, each sent 20 microseconds after a
    /// genuine `0x490` frame.
    pub fn spoof_scenario(total_frames: usize, seed: u64) -> Self {
        let fraction = 0.08;
        let ids = scenario_ids();
        let rate: f64 = ids.iter().map(|s| 1.0 / s.period).sum();
        let duration = total_frames as f64 * (1.0 - fraction) / rate;
        SynthConfig {
            profile: TrafficProfile { ids, jitter: 0.05, duration, seed },
            attack: Some(AttackSpec::spoof(0x490, &[(0, 0x03)], fraction, 0.00002)),
        }
    }

    /// The same traffic without the attack.
    pub fn attack_free(&self) -> Self {
        SynthConfig { profile: self.profile.clone(), attack: None }
    }
}

/// Declarative generator input: a traffic profile plus an optional attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub profile: TrafficProfile,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }
}

fn round_us(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

/// Background traffic only, in time order.
fn background(profile: &TrafficProfile, rng: &mut ChaCha8Rng) -> Vec<CanFrame> {
    let n_ids = profile.ids.len();
    let mut frames = Vec::with_capacity(profile.expected_frames().ceil() as usize + n_ids);
    for (slot, spec) in profile.ids.iter().enumerate() {
        let phase = spec
            .phase
            .unwrap_or(spec.period * slot as f64 / n_ids as f64);
        let mut counter: u8 = 0;
        let mut k = 0u64;
        loop {
            let base = phase + k as f64 * spec.period;
            if base >= profile.duration {
                break;
            }
            let delay = if profile.jitter > 0.0 {
                rng.gen_range(0.0..profile.jitter) * spec.period
            } else {
                0.0
            };
            let mut data = [0u8; 8];
            for (b, gen) in data.iter_mut().zip(&spec.payload) {
                *b = match *gen {
                    ByteGen::Constant(v) => v,
                    ByteGen::Counter => counter,
                    ByteGen::Random => rng.gen(),
                };
            }
            frames.push(CanFrame::new(
                round_us(base + delay),
                spec.can_id,
                &data[..spec.payload.len()],
                Label::Normal,
            ));
            counter = counter.wrapping_add(1);
            k += 1;
        }
    }
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    frames
}

/// Number of injected frames that makes them `fraction` of the final stream.
fn injection_count(n_background: usize, fraction: f64) -> usize {
    (fraction / (1.0 - fraction) * n_background as f64).round().max(1.0) as usize
}

/// Bursts at `inter_frame` spacing, placed at seeded non-overlapping offsets.
fn episode_times(n: usize, attack: &AttackSpec, duration: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let episodes = attack.episodes.min(n);
    let active = n as f64 * attack.inter_frame;
    if active >= duration {
        return Err(Error::config(format!(
            "{n} injected frames at {} s spacing do not fit in {duration} s",
            attack.inter_frame
        )));
    }
    // Split the idle time into random gaps between bursts.
    let idle = duration - active;
    let mut cuts: Vec<f64> = (0..episodes).map(|_| rng.gen_range(0.0..idle)).collect();
    cuts.sort_by(f64::total_cmp);

    let mut times = Vec::with_capacity(n);
    let base = n / episodes;
    let extra = n % episodes;
    let mut emitted = 0usize;
    for (e, cut) in cuts.iter().enumerate() {
        let len = base + usize::from(e < extra);
        let start = cut + emitted as f64 * attack.inter_frame;
        for j in 0..len {
            times.push(round_us(start + j as f64 * attack.inter_frame));
        }
        emitted += len;
    }
    Ok(times)
}

fn spoof_frames(
    bg: &[CanFrame],
    attack: &AttackSpec,
    profile: &TrafficProfile,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CanFrame>> {
    let target = attack.target_id.expect("validated");
    let legit: Vec<&CanFrame> = bg.iter().filter(|f| f.can_id == target).collect();
    if legit.is_empty() {
        return Err(Error::config(format!(
            "spoof target {target:#x} never appears in the background traffic"
        )));
    }
    let burst = n.div_ceil(legit.len());
    if let Some(spec) = profile.ids.iter().find(|s| s.can_id == target) {
        if burst as f64 * attack.inter_frame >= spec.period {
            return Err(Error::config(format!(
                "{burst} spoofed frames per period of {target:#x} exceed its {} s period",
                spec.period
            )));
        }
    }
    let shadowed = n.div_ceil(burst);
    let mut picks = index::sample(rng, legit.len(), shadowed).into_vec();
    picks.sort_unstable();

    let mut out = Vec::with_capacity(n);
    for (i, &p) in picks.iter().enumerate() {
        let src = legit[p];
        let count = if i + 1 == picks.len() { n - burst * i } else { burst };
        // Replay the legitimate payload with the overridden bytes.
        let mut data = src.data;
        for &(idx, value) in &attack.byte_overrides {
            data[idx as usize] = value;
        }
        for k in 1..=count {
            out.push(CanFrame {
                timestamp: round_us(src.timestamp + k as f64 * attack.inter_frame),
                can_id: target,
                dlc: src.dlc.max(attack.byte_overrides.iter().map(|&(i, _)| i + 1).max().unwrap_or(0)),
                data,
                label: Label::Anomalous,
            });
        }
    }
    Ok(out)
}

/// Generates the labeled frame stream for `profile`, with `attack` injected.
pub fn generate(profile: &TrafficProfile, attack: Option<&AttackSpec>) -> Result<Vec<CanFrame>> {
    profile.validate()?;
    if let Some(a) = attack {
        a.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut frames = background(profile, &mut rng);
    let Some(attack) = attack else {
        return Ok(frames);
    };

    let n = injection_count(frames.len(), attack.injected_fraction);
    let injected = match attack.kind {
        AttackKind::Dos => episode_times(n, attack, profile.duration, &mut rng)?
            .into_iter()
            .map(|t| CanFrame::new(t, 0x000, &[0; 8], Label::Anomalous))
            .collect(),
        AttackKind::Fuzzy => episode_times(n, attack, profile.duration, &mut rng)?
            .into_iter()
            .map(|t| {
                let id = rng.gen_range(0..=0x7FF);
                let data: [u8; 8] = rng.gen();
                CanFrame::new(t, id, &data, Label::Anomalous)
            })
            .collect(),
        AttackKind::Spoof => spoof_frames(&frames, attack, profile, n, &mut rng)?,
    };
    frames.extend(injected);
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(frames)
}

pub fn generate_config(config: &SynthConfig) -> Result<Vec<CanFrame>> {
    generate(&config.profile, config.attack.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_ids() -> TrafficProfile {
        TrafficProfile {
            ids: [0x130, 0x2b0, 0x490]
                .into_iter()
                .map(|id| IdSpec {
                    can_id: id,
                    period: 0.0005,
                    payload: vec![ByteGen::Constant(0), ByteGen::Counter, ByteGen::Random, ByteGen::Constant(0x3c)],
                    phase: None,
                })
                .collect(),
            jitter: 0.1,
            duration: 10.0,
            seed: 3,
        }
    }

    #[test]
    fn background_count_matches_rate_arithmetic() {
        let p = three_ids();
        let frames = generate(&p, None).unwrap();
        let expected = p.expected_frames();
        assert_eq!(expected.round(), 60_000.0);
        assert!((frames.len() as f64 - expected).abs() <= p.ids.len() as f64);
        assert!(frames.iter().all(|f| f.label == Label::Normal));
        assert!(frames.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn counter_bytes_increment_per_emission() {
        let frames = generate(&three_ids(), None).unwrap();
        let counters: Vec<u8> = frames.iter().filter(|f| f.can_id == 0x490).map(|f| f.data[1]).take(300).collect();
        for (i, c) in counters.iter().enumerate() {
            assert_eq!(*c, (i % 256) as u8);
        }
    }

    #[test]
    fn spoof_overrides_first_byte_in_tight_bursts() {
        let p = three_ids();
        let attack = AttackSpec::spoof(0x490, &[(0, 0x03)], 0.05, 0.00002);
        let frames = generate(&p, Some(&attack)).unwrap();
        let mut seen = 0;
        for (i, f) in frames.iter().enumerate() {
            if f.label == Label::Anomalous {
                seen += 1;
                assert_eq!(f.can_id, 0x490);
                assert_eq!(f.data[0], 3);
                let gap = f.timestamp - frames[i - 1].timestamp;
                assert!(gap < 0.00004, "gap {gap}");
                let prev_same = frames[..i].iter().rev().find(|g| g.can_id == 0x490).unwrap();
                assert!(f.timestamp - prev_same.timestamp < 0.0005);
            }
        }
        let realized = seen as f64 / frames.len() as f64;
        assert!((realized / 0.05 - 1.0).abs() < 0.1, "{realized}");
    }

    #[test]
    fn dos_fraction_matches_request() {
        let requested = 587_521.0 / 3_665_771.0;
        let attack = AttackSpec::new(AttackKind::Dos, requested, 0.0003);
        let frames = generate(&three_ids(), Some(&attack)).unwrap();
        let injected: Vec<_> = frames.iter().filter(|f| f.label == Label::Anomalous).collect();
        assert!(injected.iter().all(|f| f.can_id == 0 && f.data == [0; 8]));
        let realized = injected.len() as f64 / frames.len() as f64;
        assert!((realized / requested - 1.0).abs() < 0.1, "{realized}");
    }

    #[test]
    fn fuzzy_and_determinism() {
        let attack = AttackSpec::new(AttackKind::Fuzzy, 0.1, 0.0005);
        let a = generate(&three_ids(), Some(&attack)).unwrap();
        let b = generate(&three_ids(), Some(&attack)).unwrap();
        assert_eq!(a, b);
        let distinct: std::collections::HashSet<u32> =
            a.iter().filter(|f| f.label == Label::Anomalous).map(|f| f.can_id).collect();
        assert!(distinct.len() > 100);
        // Background frames are exactly the attack-free stream.
        let clean = generate(&three_ids(), None).unwrap();
        let bg = a.iter().filter(|f| f.label == Label::Normal).count();
        assert_eq!(bg, clean.len());
    }

    #[test]
    fn config_errors() {
        let p = three_ids();
        let mut spoof = AttackSpec::spoof(0x490, &[], 0.1, 0.00002);
        spoof.target_id = None;
        assert!(matches!(generate(&p, Some(&spoof)), Err(Error::Config(_))));
        assert!(generate(&p, Some(&AttackSpec::spoof(0x490, &[(8, 1)], 0.1, 0.00002))).is_err());
        assert!(generate(&p, Some(&AttackSpec::new(AttackKind::Dos, 1.0, 0.001))).is_err());
        let mut bad = p.clone();
        bad.jitter = 0.5;
        assert!(generate(&bad, None).is_err());
    }

    #[test]
    fn toml_config() {
        let cfg = SynthConfig::from_toml(
            r#"
            [profile]
            duration = 1.0
            jitter = 0.05
            seed = 9
            [[profile.ids]]
            can_id = 0x490
            period = 0.001
            payload = [{ constant = 0 }, "counter", "random"]

            [attack]
            kind = "spoof"
            target_id = 0x490
            injected_fraction = 0.1
            inter_frame = 0.00002
            byte_overrides = [[0, 3]]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.profile.ids[0].payload[0], ByteGen::Constant(0));
        assert_eq!(cfg.attack.as_ref().unwrap().byte_overrides, vec![(0, 3)]);
        let frames = generate_config(&cfg).unwrap();
        assert!(frames.iter().any(|f| f.label == Label::Anomalous));
    }
}
