//! Dataset poisoning attacks: BadNet patch, Blended key, SIG sinusoid.

use crate::data::{LabeledImageSet, Provenance};
use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Badnet,
    Blended,
    Sig,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Badnet => "badnet",
            AttackKind::Blended => "blended",
            AttackKind::Sig => "sig",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub attack: AttackKind,
    pub poisoning_ratio: f32,
    pub target_label: u32,
    pub trigger: TriggerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerParams {
    /// Solid square stamped at the bottom-right corner.
    Patch { size: usize, value: f32 },
    /// Blend with a fixed seeded noise key image.
    Blend { key_seed: u64, blend_weight: f32 },
    /// Column-wise sinusoid, the clean-label trigger.
    Sinusoid { amplitude: f32, frequency: u32 },
}

impl PoisonSpec {
    pub fn badnet(poisoning_ratio: f32, target_label: u32) -> Self {
        PoisonSpec {
            attack: AttackKind::Badnet,
            poisoning_ratio,
            target_label,
            trigger: TriggerParams::Patch { size: 3, value: 1.0 },
        }
    }

    pub fn blended(poisoning_ratio: f32, target_label: u32) -> Self {
        PoisonSpec {
            attack: AttackKind::Blended,
            poisoning_ratio,
            target_label,
            trigger: TriggerParams::Blend { key_seed: 0x4b45_59, blend_weight: 0.2 },
        }
    }

    /// SIG defaults from the original attack: amplitude 20/255, frequency 6.
    pub fn sig(poisoning_ratio: f32, target_label: u32) -> Self {
        PoisonSpec {
            attack: AttackKind::Sig,
            poisoning_ratio,
            target_label,
            trigger: TriggerParams::Sinusoid { amplitude: 20.0 / 255.0, frequency: 6 },
        }
    }

    fn validate(&self, set: &LabeledImageSet) -> Result<()> {
        if !(0.0..=1.0).contains(&self.poisoning_ratio) {
            return Err(Error::PoisonSpec(format!(
                "poisoning ratio {} outside [0,1]",
                self.poisoning_ratio
            )));
        }
        if self.target_label as usize >= set.classes {
            return Err(Error::PoisonSpec(format!(
                "target label {} out of range for {} classes",
                self.target_label, set.classes
            )));
        }
        let (_, h, w) = set.dims();
        match self.trigger {
            TriggerParams::Patch { size, value } => {
                if size == 0 || size > h || size > w {
                    return Err(Error::PoisonSpec(format!(
                        "patch {size}x{size} does not fit {h}x{w} images"
                    )));
                }
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::PoisonSpec(format!("patch value {value} outside [0,1]")));
                }
            }
            TriggerParams::Blend { blend_weight, .. } => {
                if !(0.0..=1.0).contains(&blend_weight) {
                    return Err(Error::PoisonSpec(format!(
                        "blend weight {blend_weight} outside [0,1]"
                    )));
                }
            }
            TriggerParams::Sinusoid { amplitude, frequency } => {
                if !(0.0..=1.0).contains(&amplitude) {
                    return Err(Error::PoisonSpec(format!("amplitude {amplitude} outside [0,1]")));
                }
                if frequency == 0 {
                    return Err(Error::PoisonSpec("frequency must be a positive integer".into()));
                }
            }
        }
        Ok(())
    }

    /// The blend key image for this spec's dims (noise in [0,1]).
    pub fn blend_key(&self, c: usize, h: usize, w: usize) -> Option<Vec<f32>> {
        match self.trigger {
            TriggerParams::Blend { key_seed, .. } => {
                let mut rng = Rng::split(key_seed, 0xb1e4d);
                Some((0..c * h * w).map(|_| rng.next_f32()).collect())
            }
            _ => None,
        }
    }
}

/// Stamp this spec's trigger onto one image in place. Pixels stay in [0,1].
pub fn apply_trigger(img: &mut [f32], c: usize, h: usize, w: usize, spec: &PoisonSpec) {
    match spec.trigger {
        TriggerParams::Patch { size, value } => {
            for ch in 0..c {
                for y in h - size..h {
                    for x in w - size..w {
                        img[(ch * h + y) * w + x] = value;
                    }
                }
            }
        }
        TriggerParams::Blend { blend_weight, .. } => {
            let key = spec.blend_key(c, h, w).unwrap();
            for (px, kv) in img.iter_mut().zip(&key) {
                *px = ((1.0 - blend_weight) * *px + blend_weight * kv).clamp(0.0, 1.0);
            }
        }
        TriggerParams::Sinusoid { amplitude, frequency } => {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = amplitude
                            * (2.0 * std::f32::consts::PI * x as f32 * frequency as f32 / w as f32)
                                .sin();
                        let px = &mut img[(ch * h + y) * w + x];
                        *px = (*px + v).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

fn pick_indices(eligible: &[usize], ratio: f32, rng: &mut Rng) -> Vec<usize> {
    let m = (ratio as f64 * eligible.len() as f64).floor() as usize;
    let mut pool = eligible.to_vec();
    rng.shuffle(&mut pool);
    let mut chosen: Vec<usize> = pool[..m].to_vec();
    chosen.sort_unstable();
    chosen
}

fn poison_dirty_label(
    set: &LabeledImageSet,
    spec: &PoisonSpec,
    rng: &mut Rng,
) -> Result<LabeledImageSet> {
    spec.validate(set)?;
    let all: Vec<usize> = (0..set.len()).collect();
    let chosen = pick_indices(&all, spec.poisoning_ratio, rng);
    let (c, h, w) = set.dims();
    let mut out = set.clone();
    let m = out.sample_len();
    for &i in &chosen {
        apply_trigger(&mut out.images.data_mut()[i * m..(i + 1) * m], c, h, w, spec);
        out.labels[i] = spec.target_label;
        out.provenance[i] = Provenance::Poisoned;
    }
    Ok(out)
}

/// Stamp a solid patch on a seeded uniform subset and relabel to the target.
pub fn poison_badnet(set: &LabeledImageSet, spec: &PoisonSpec, rng: &mut Rng) -> Result<LabeledImageSet> {
    if spec.attack != AttackKind::Badnet {
        return Err(Error::PoisonSpec("poison_badnet called with a non-badnet spec".into()));
    }
    poison_dirty_label(set, spec, rng)
}

/// Blend a seeded key image into a subset and relabel to the target.
pub fn poison_blended(set: &LabeledImageSet, spec: &PoisonSpec, rng: &mut Rng) -> Result<LabeledImageSet> {
    if spec.attack != AttackKind::Blended {
        return Err(Error::PoisonSpec("poison_blended called with a non-blended spec".into()));
    }
    poison_dirty_label(set, spec, rng)
}

/// Clean-label attack: perturb only samples already carrying the target
/// label; the ratio applies within that class and labels never change.
pub fn poison_sig(set: &LabeledImageSet, spec: &PoisonSpec, rng: &mut Rng) -> Result<LabeledImageSet> {
    if spec.attack != AttackKind::Sig {
        return Err(Error::PoisonSpec("poison_sig called with a non-sig spec".into()));
    }
    spec.validate(set)?;
    let eligible: Vec<usize> =
        (0..set.len()).filter(|&i| set.labels[i] == spec.target_label).collect();
    let chosen = pick_indices(&eligible, spec.poisoning_ratio, rng);
    let (c, h, w) = set.dims();
    let mut out = set.clone();
    let m = out.sample_len();
    for &i in &chosen {
        apply_trigger(&mut out.images.data_mut()[i * m..(i + 1) * m], c, h, w, spec);
        out.provenance[i] = Provenance::Poisoned;
    }
    Ok(out)
}

pub fn apply_poison(set: &LabeledImageSet, spec: &PoisonSpec, rng: &mut Rng) -> Result<LabeledImageSet> {
    match spec.attack {
        AttackKind::Badnet => poison_badnet(set, spec, rng),
        AttackKind::Blended => poison_blended(set, spec, rng),
        AttackKind::Sig => poison_sig(set, spec, rng),
    }
}

/// Build the attack-success evaluation set: clean test samples whose true
/// label differs from the target, all stamped with the trigger. Labels keep
/// their original (non-target) values.
pub fn build_asr_eval_set(test: &LabeledImageSet, spec: &PoisonSpec) -> Result<LabeledImageSet> {
    spec.validate(test)?;
    let keep: Vec<usize> =
        (0..test.len()).filter(|&i| test.labels[i] != spec.target_label).collect();
    if keep.is_empty() {
        return Err(Error::Metric("no eligible samples for the ASR set".into()));
    }
    let mut out = test.subset(&keep);
    let (c, h, w) = out.dims();
    let m = out.sample_len();
    for i in 0..out.len() {
        apply_trigger(&mut out.images.data_mut()[i * m..(i + 1) * m], c, h, w, spec);
        out.provenance[i] = Provenance::Poisoned;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_shapes;

    fn small_set() -> LabeledImageSet {
        synth_shapes(1000, 4, 16, 16, 7).unwrap()
    }

    #[test]
    fn ratio_zero_changes_nothing() {
        let set = small_set();
        let mut rng = Rng::new(1);
        let out = poison_badnet(&set, &PoisonSpec::badnet(0.0, 0), &mut rng).unwrap();
        assert_eq!(out.images.data(), set.images.data());
        assert_eq!(out.labels, set.labels);
        assert_eq!(out.poisoned_count(), 0);
    }

    #[test]
    fn badnet_count_and_labels() {
        let set = small_set();
        let mut rng = Rng::new(2);
        let out = poison_badnet(&set, &PoisonSpec::badnet(0.1, 0), &mut rng).unwrap();
        assert_eq!(out.poisoned_count(), 100);
        for i in 0..out.len() {
            if out.provenance[i] == Provenance::Poisoned {
                assert_eq!(out.labels[i], 0);
            } else {
                assert_eq!(out.labels[i], set.labels[i]);
            }
        }
    }

    #[test]
    fn badnet_stamp_is_exact_and_local() {
        let set = small_set();
        let mut rng = Rng::new(3);
        let out = poison_badnet(&set, &PoisonSpec::badnet(0.05, 1), &mut rng).unwrap();
        let (_, h, w) = set.dims();
        for i in 0..out.len() {
            if out.provenance[i] != Provenance::Poisoned {
                continue;
            }
            let (orig, img) = (set.image(i), out.image(i));
            for y in 0..h {
                for x in 0..w {
                    let in_patch = y >= h - 3 && x >= w - 3;
                    if in_patch {
                        assert_eq!(img[y * w + x], 1.0);
                    } else {
                        assert_eq!(img[y * w + x], orig[y * w + x]);
                    }
                }
            }
        }
    }

    #[test]
    fn poison_twice_same_seed_never_exceeds_ratio() {
        let set = small_set();
        let spec = PoisonSpec::badnet(0.1, 0);
        let mut rng = Rng::new(4);
        let once = poison_badnet(&set, &spec, &mut rng).unwrap();
        let mut rng = Rng::new(4);
        let twice = poison_badnet(&once, &spec, &mut rng).unwrap();
        assert_eq!(twice.poisoned_count(), 100);
    }

    #[test]
    fn blended_degenerate_weights() {
        let set = small_set();
        let mut spec = PoisonSpec::blended(0.1, 2);
        let mut rng = Rng::new(5);
        // weight 0: pixels unchanged, labels still flipped
        if let TriggerParams::Blend { blend_weight, .. } = &mut spec.trigger {
            *blend_weight = 0.0;
        }
        let out = poison_blended(&set, &spec, &mut rng).unwrap();
        assert_eq!(out.images.data(), set.images.data());
        assert_eq!(out.poisoned_count(), 100);
        assert!(out
            .provenance
            .iter()
            .zip(&out.labels)
            .filter(|(p, _)| **p == Provenance::Poisoned)
            .all(|(_, &l)| l == 2));
        // weight 1: poisoned pixels equal the key exactly
        if let TriggerParams::Blend { blend_weight, .. } = &mut spec.trigger {
            *blend_weight = 1.0;
        }
        let mut rng = Rng::new(5);
        let out = poison_blended(&set, &spec, &mut rng).unwrap();
        let (c, h, w) = set.dims();
        let key = spec.blend_key(c, h, w).unwrap();
        let poisoned = (0..out.len()).find(|&i| out.provenance[i] == Provenance::Poisoned).unwrap();
        assert_eq!(out.image(poisoned), &key[..]);
    }

    #[test]
    fn sig_is_clean_label() {
        let set = small_set();
        let spec = PoisonSpec::sig(0.5, 1);
        let mut rng = Rng::new(6);
        let out = poison_sig(&set, &spec, &mut rng).unwrap();
        assert_eq!(out.labels, set.labels); // labels untouched
        for i in 0..out.len() {
            if set.labels[i] != 1 {
                assert_eq!(out.image(i), set.image(i), "non-target sample {i} modified");
            }
        }
        // ratio applies within the target class
        let class_count = set.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(out.poisoned_count(), class_count / 2);
    }

    #[test]
    fn sig_zero_amplitude_is_identity() {
        let set = small_set();
        let mut spec = PoisonSpec::sig(1.0, 0);
        if let TriggerParams::Sinusoid { amplitude, .. } = &mut spec.trigger {
            *amplitude = 0.0;
        }
        let mut rng = Rng::new(7);
        let out = poison_sig(&set, &spec, &mut rng).unwrap();
        assert_eq!(out.images.data(), set.images.data());
    }

    #[test]
    fn sig_peak_column_gets_amplitude() {
        // at column j = w/(4f) the sinusoid is at its peak
        let (w, f) = (16usize, 2u32);
        let mut img = vec![0.5f32; w]; // one row, one channel
        let spec = PoisonSpec {
            attack: AttackKind::Sig,
            poisoning_ratio: 1.0,
            target_label: 0,
            trigger: TriggerParams::Sinusoid { amplitude: 0.25, frequency: f },
        };
        apply_trigger(&mut img, 1, 1, w, &spec);
        let peak = w / (4 * f as usize);
        assert!((img[peak] - 0.75).abs() < 1e-6, "col {peak}: {}", img[peak]);
    }

    #[test]
    fn pixel_range_preserved_by_all_attacks() {
        let set = small_set();
        for spec in [PoisonSpec::badnet(0.3, 0), PoisonSpec::blended(0.3, 0), PoisonSpec::sig(0.9, 0)] {
            let mut rng = Rng::new(8);
            let out = apply_poison(&set, &spec, &mut rng).unwrap();
            assert!(out.images.iter().all(|&v| (0.0..=1.0).contains(&v)), "{:?}", spec.attack);
        }
    }

    #[test]
    fn oversized_patch_is_spec_error() {
        let set = small_set();
        let mut spec = PoisonSpec::badnet(0.1, 0);
        spec.trigger = TriggerParams::Patch { size: 40, value: 1.0 };
        let mut rng = Rng::new(9);
        assert!(matches!(poison_badnet(&set, &spec, &mut rng), Err(Error::PoisonSpec(_))));
    }

    #[test]
    fn asr_set_excludes_target_class_and_stamps_all() {
        let set = small_set();
        let spec = PoisonSpec::badnet(0.1, 0);
        let asr = build_asr_eval_set(&set, &spec).unwrap();
        assert!(asr.labels.iter().all(|&l| l != 0));
        assert_eq!(asr.len(), set.labels.iter().filter(|&&l| l != 0).count());
        let (_, h, w) = asr.dims();
        for i in 0..asr.len() {
            assert_eq!(asr.image(i)[(h - 1) * w + (w - 1)], 1.0);
        }
    }

    #[test]
    fn asr_set_with_only_target_class_is_metric_error() {
        let base = small_set();
        let only_target: Vec<usize> =
            (0..base.len()).filter(|&i| base.labels[i] == 0).collect();
        let set = base.subset(&only_target);
        let spec = PoisonSpec::badnet(0.1, 0);
        assert!(matches!(build_asr_eval_set(&set, &spec), Err(Error::Metric(_))));
    }
}
