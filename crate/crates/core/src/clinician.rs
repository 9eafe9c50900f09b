//! Simulated clinician: picks the proposal closest to a personal ground
//! truth and approves once the aggregate is good enough.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::mask::BinaryMask;
use crate::metrics::dice;
use crate::model::ModelParams;
use crate::phantom::ClinicianProfile;
use crate::proposals::CorrectionProposal;
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::session::{Action, ImageSource, SessionConfig, SessionState, SessionStatus};

/// Dice-greedy choice; ties go to the lowest cluster id.
pub fn select_proposal(proposals: &[CorrectionProposal], personal_gt: &BinaryMask) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for p in proposals {
        let d = dice(&p.representative_binary, personal_gt)?;
        match best {
            Some((id, bd)) if d < bd || (d == bd && id < p.cluster_id) => {}
            _ => best = Some((p.cluster_id, d)),
        }
    }
    best.map(|(id, _)| id).ok_or_else(|| invalid("no proposals to choose from"))
}

pub fn decide_approval(profile: &ClinicianProfile, y_app: &BinaryMask, personal_gt: &BinaryMask) -> Result<bool> {
    if y_app.shape() != personal_gt.shape() {
        return Err(shape("prediction and ground truth differ in shape"));
    }
    Ok(dice(y_app, personal_gt)? >= profile.approval_dice)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub iteration: usize,
    pub dice: f64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub status: SessionStatus,
    pub iterations_used: usize,
}

impl Trajectory {
    pub fn dices(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.dice).collect()
    }
}

/// Probability of picking a uniformly random proposal instead of the best
/// one. Zero reproduces the deterministic clinician.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionNoise(pub f64);

/// Drives a session to approval or the iteration cap.
pub fn run_simulation(
    config: &SessionConfig,
    image: &ImageSource,
    model: &ModelParams,
    profile: &ClinicianProfile,
    personal_gt: &BinaryMask,
) -> Result<Trajectory> {
    Ok(simulate(config, image, model, profile, personal_gt, SelectionNoise::default())?.0)
}

/// [`run_simulation`] that also hands back the final session state.
pub fn simulate(
    config: &SessionConfig,
    image: &ImageSource,
    model: &ModelParams,
    profile: &ClinicianProfile,
    personal_gt: &BinaryMask,
    noise: SelectionNoise,
) -> Result<(Trajectory, SessionState)> {
    if !(0.0..=1.0).contains(&noise.0) {
        return Err(invalid("selection noise must lie in [0, 1]"));
    }
    let mut state = SessionState::start(config.clone(), image.clone(), Some(personal_gt.clone()), model)?;
    let mut noise_rng = rng_from_seed(derive_seed(config.seed, &[stream::NOISE]));
    let mut steps = Vec::new();
    while state.status == SessionStatus::Active {
        let iteration = state.iteration;
        let pred = state.step_segment(model)?;
        let d = dice(&pred.y_app, personal_gt)?;
        let action = if decide_approval(profile, &pred.y_app, personal_gt)? {
            state.approve()?;
            Action::Approved
        } else {
            let mut choice = select_proposal(&pred.proposals, personal_gt)?;
            if noise.0 > 0.0 && noise_rng.random::<f64>() < noise.0 {
                choice = noise_rng.random_range(0..pred.proposals.len());
            }
            state.apply_selection(choice, model)?;
            Action::Selected { cluster_id: choice }
        };
        steps.push(TrajectoryStep { iteration, dice: d, action });
    }
    let iterations_used = steps.len();
    Ok((Trajectory { steps, status: state.status, iterations_used }, state))
}

/// One CSV row per step: `image_id,clinician_id,iteration,dice,action`.
pub fn write_trajectories_csv<W: Write>(out: W, rows: &[(String, u32, Trajectory)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "clinician_id", "iteration", "dice", "action"])?;
    for (image_id, clinician, traj) in rows {
        for s in &traj.steps {
            let action = match s.action {
                Action::Approved => "approved".to_string(),
                Action::Selected { cluster_id } => format!("select:{cluster_id}"),
            };
            w.write_record([image_id.clone(), clinician.to_string(), s.iteration.to_string(), format!("{:.6}", s.dice), action])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{SignedDiff, SoftMask};
    use crate::model::Architecture;
    use crate::phantom::{annotate, generate_phantom};

    fn proposal(id: usize, bits: &[u8]) -> CorrectionProposal {
        let b = BinaryMask::new(1, bits.len(), bits.iter().map(|&x| x == 1).collect()).unwrap();
        CorrectionProposal {
            cluster_id: id,
            representative_soft: SoftMask::filled(1, bits.len(), 0.5),
            diff: SignedDiff::between(&b, &b).unwrap(),
            representative_binary: b,
            member_count: 1,
        }
    }

    #[test]
    fn selection_examples() {
        let gt = BinaryMask::new(1, 4, vec![true, true, false, false]).unwrap();
        assert_eq!(select_proposal(&[proposal(0, &[0, 0, 1, 1])], &gt).unwrap(), 0);
        let ps = vec![proposal(0, &[1, 0, 0, 0]), proposal(1, &[1, 1, 0, 0]), proposal(2, &[1, 1, 1, 0])];
        assert_eq!(select_proposal(&ps, &gt).unwrap(), 1);
        // tie between 0 and 2: lowest id
        let tied = vec![proposal(0, &[1, 0, 0, 0]), proposal(1, &[0, 0, 1, 1]), proposal(2, &[0, 1, 0, 0])];
        assert_eq!(select_proposal(&tied, &gt).unwrap(), 0);
        let mut rev = tied.clone();
        rev.reverse();
        assert_eq!(select_proposal(&rev, &gt).unwrap(), 0);
        assert!(select_proposal(&[], &gt).is_err());
    }

    #[test]
    fn approval_boundary() {
        let a = BinaryMask::new(1, 4, vec![true, true, false, false]).unwrap();
        let profile = ClinicianProfile::new(1, 0.5, 1.0).unwrap();
        assert!(decide_approval(&profile, &a, &a).unwrap());
        let disjoint = BinaryMask::new(1, 4, vec![false, false, true, true]).unwrap();
        assert!(!decide_approval(&profile, &a, &disjoint).unwrap());
        // Dice 2*2/(3+2) = 0.8 against a stricter 0.81 threshold
        let b = BinaryMask::new(1, 4, vec![true, true, true, false]).unwrap();
        assert!(!decide_approval(&ClinicianProfile::new(1, 0.5, 0.81).unwrap(), &b, &a).unwrap());
        assert!(decide_approval(&ClinicianProfile::new(1, 0.5, 0.8).unwrap(), &b, &a).unwrap());
        assert!(decide_approval(&profile, &a, &BinaryMask::filled(1, 3, false)).is_err());
    }

    fn setup() -> (SessionConfig, ImageSource, ModelParams, BinaryMask) {
        let arch = Architecture { components: 4, latent_dim: 3, embed_dim: 5, adapter_hidden: 8, encoder_hidden: 8, ..Default::default() };
        let cfg = SessionConfig { candidates: 12, components: 4, proposals: 3, latent_dim: 3, embed_dim: 5, max_iterations: 4, seed: 5, ..Default::default() };
        let src = ImageSource::Phantom { seed: 8, height: 24, width: 24 };
        let gt = annotate(&ClinicianProfile::new(1, 0.4, 0.9).unwrap(), &generate_phantom(8, 24, 24).unwrap());
        (cfg, src, ModelParams::init(&arch, 1), gt)
    }

    #[test]
    fn zero_approval_threshold_stops_immediately() {
        let (cfg, src, model, gt) = setup();
        let t = run_simulation(&cfg, &src, &model, &ClinicianProfile::new(1, 0.4, 0.0).unwrap(), &gt).unwrap();
        assert_eq!(t.iterations_used, 1);
        assert_eq!(t.status, SessionStatus::Approved);
        assert!(t.steps[0].dice >= 0.0);
    }

    #[test]
    fn cap_and_replay() {
        let (cfg, src, model, gt) = setup();
        let strict = ClinicianProfile::new(1, 0.4, 1.0).unwrap();
        let (t, state) = simulate(&cfg, &src, &model, &strict, &gt, SelectionNoise(0.0)).unwrap();
        if t.status == SessionStatus::Exhausted {
            assert_eq!(t.iterations_used, 4);
        }
        assert_eq!(t, run_simulation(&cfg, &src, &model, &strict, &gt).unwrap());
        assert!(t.steps.iter().all(|s| (0.0..=1.0).contains(&s.dice)));
        state.to_doc(&model.content_hash()).replay(&model).unwrap();
        let noisy = simulate(&cfg, &src, &model, &strict, &gt, SelectionNoise(1.0)).unwrap().0;
        assert_eq!(noisy, simulate(&cfg, &src, &model, &strict, &gt, SelectionNoise(1.0)).unwrap().0);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let (cfg, src, model, gt) = setup();
        let t = run_simulation(&cfg, &src, &model, &ClinicianProfile::new(2, 0.4, 1.0).unwrap(), &gt).unwrap();
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, &[("phantom-0000".into(), 2, t.clone())]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + t.steps.len());
        assert!(text.starts_with("image_id,clinician_id,iteration,dice,action\n"));
    }
}
