//! Four-step teacher-student pipeline: train a teacher on the labeled set,
//! score the unlabeled pool, keep the top-K high-confidence pseudo-labels per
//! class, train a latent-guided student on the combined set, then fine-tune
//! the student on the original labels at a reduced learning rate.

use crate::classifier::{
    evaluate, predict_batch, train_supervised, Classifier, NetworkConfig, TrainConfig,
    TrainHistory,
};
use crate::data::{DatasetSplit, UnlabeledExample, WaferMap, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::vae::VaeModel;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub example_id: String,
    pub predicted_class: usize,
    /// The teacher's max softmax probability for this example.
    pub confidence: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub confidence_threshold: f64,
    pub top_k: usize,
    pub teacher: NetworkConfig,
    pub student: NetworkConfig,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub fine_tune_epochs: usize,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let floor = 1.0 / self.teacher.num_classes as f64;
        if self.confidence_threshold <= floor || self.confidence_threshold >= 1.0 {
            return Err(Error::invalid(format!(
                "confidence_threshold must lie in ({floor:.4}, 1), got {}",
                self.confidence_threshold
            )));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        Ok(())
    }
}

/// One teacher pseudo-label per unlabeled example, in pool order.
pub fn score_unlabeled(
    teacher: &Classifier,
    vae_if_fused: Option<&VaeModel>,
    unlabeled: &[UnlabeledExample],
) -> Result<Vec<PseudoLabel>> {
    if unlabeled.is_empty() {
        return Err(Error::invalid("score_unlabeled: empty unlabeled set"));
    }
    let refs: Vec<&WaferMap> = unlabeled.iter().map(|u| &u.map).collect();
    let predictions = predict_batch(teacher, vae_if_fused, &refs)?;
    Ok(unlabeled
        .iter()
        .zip(predictions)
        .map(|(u, (class, confidence))| PseudoLabel {
            example_id: u.map.id.clone(),
            predicted_class: class,
            confidence,
        })
        .collect())
}

/// Per predicted class: drop entries below `threshold`, sort by confidence
/// descending (ties broken by example_id ascending), keep the first `k`.
/// The union is returned class by class in that order.
pub fn select_topk(pseudo: &[PseudoLabel], k: usize, threshold: f64) -> Vec<PseudoLabel> {
    let mut selected = Vec::new();
    for class in 0..NUM_CLASSES {
        let mut survivors: Vec<&PseudoLabel> = pseudo
            .iter()
            .filter(|p| p.predicted_class == class && p.confidence >= threshold)
            .collect();
        survivors.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap()
                .then_with(|| a.example_id.cmp(&b.example_id))
        });
        selected.extend(survivors.into_iter().take(k).cloned());
    }
    selected
}

#[derive(Clone, Debug)]
pub struct StudentExample {
    pub map: WaferMap,
    /// False for original true labels, true for teacher pseudo-labels.
    pub pseudo_labeled: bool,
}

/// Union of the original labeled set and the selected pool examples carrying
/// their pseudo-labels as labels.
pub fn build_student_set(
    labeled: &[WaferMap],
    selected: &[PseudoLabel],
    pool: &[UnlabeledExample],
) -> Result<Vec<StudentExample>> {
    let mut out: Vec<StudentExample> = labeled
        .iter()
        .map(|m| StudentExample { map: m.clone(), pseudo_labeled: false })
        .collect();
    for sel in selected {
        let source = pool
            .iter()
            .find(|u| u.map.id == sel.example_id)
            .ok_or_else(|| {
                Error::invalid(format!("selected id '{}' not present in pool", sel.example_id))
            })?;
        let mut map = source.map.clone();
        map.label = Some(sel.predicted_class);
        out.push(StudentExample { map, pseudo_labeled: true });
    }
    let mut ids: Vec<&str> = out.iter().map(|e| e.map.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("student set ids are not disjoint"));
    }
    Ok(out)
}

/// Trains a fresh student on the combined set; pseudo-labeled and true-labeled
/// examples are weighted equally.
pub fn train_student(
    student_config: &NetworkConfig,
    vae: Option<&VaeModel>,
    student_set: &[StudentExample],
    train: &TrainConfig,
) -> Result<(Classifier, TrainHistory)> {
    let mut student = Classifier::new(student_config.clone(), train.seed)?;
    let maps: Vec<WaferMap> = student_set.iter().map(|e| e.map.clone()).collect();
    let history = train_supervised(&mut student, vae, &maps, train)?;
    Ok((student, history))
}

/// Continued training on true-labeled data only, at lr/10 with fresh
/// optimizer state. `fine_tune_epochs = 0` leaves the model untouched.
pub fn fine_tune(
    student: &mut Classifier,
    vae: Option<&VaeModel>,
    labeled: &[WaferMap],
    fine_tune_epochs: usize,
    base: &TrainConfig,
) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::invalid("fine_tune: empty labeled set"));
    }
    if fine_tune_epochs == 0 {
        return Ok(());
    }
    let cfg = TrainConfig {
        epochs: fine_tune_epochs,
        lr: base.lr / 10.0,
        seed: base.seed.wrapping_add(0xf17e),
        ..base.clone()
    };
    train_supervised(student, vae, labeled, &cfg)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub config: PipelineConfig,
    pub teacher_metrics: MetricsReport,
    pub student_metrics: MetricsReport,
    pub selected_per_class: Vec<usize>,
    pub pseudo_label_count: usize,
    /// Accuracy of selected pseudo-labels against hidden true labels;
    /// evaluation-only, absent when nothing was selected.
    pub pseudo_label_accuracy: Option<f64>,
}

pub struct PipelineOutcome {
    pub teacher: Classifier,
    pub student: Classifier,
    pub report: PipelineReport,
}

/// Executes the four steps in order and evaluates teacher and student on the
/// test split. The teacher is never mutated after its training step.
pub fn run_pipeline(
    config: &PipelineConfig,
    data: &DatasetSplit,
    vae: Option<&VaeModel>,
) -> Result<PipelineOutcome> {
    config.validate()?;
    let teacher_vae = if config.teacher.fusion_point != crate::classifier::FusionPoint::None {
        vae
    } else {
        None
    };
    let student_vae = if config.student.fusion_point != crate::classifier::FusionPoint::None {
        vae
    } else {
        None
    };

    // Step 1: teacher on the labeled set.
    let mut teacher = Classifier::new(config.teacher.clone(), config.teacher_train.seed)?;
    train_supervised(&mut teacher, teacher_vae, &data.labeled, &config.teacher_train)?;
    let teacher = teacher; // frozen from here on

    // Step 2: label and score the unlabeled pool, keep top-K per class.
    let pseudo = score_unlabeled(&teacher, teacher_vae, &data.unlabeled)?;
    let selected = select_topk(&pseudo, config.top_k, config.confidence_threshold);

    // Step 3: student on the combined set, with latents when fused.
    let student_set = build_student_set(&data.labeled, &selected, &data.unlabeled)?;
    let (mut student, _history) =
        train_student(&config.student, student_vae, &student_set, &config.student_train)?;

    // Step 4: fine-tune on the original labels only.
    fine_tune(
        &mut student,
        student_vae,
        &data.labeled,
        config.fine_tune_epochs,
        &config.student_train,
    )?;

    let teacher_metrics = evaluate(&teacher, teacher_vae, &data.test)?;
    let student_metrics = evaluate(&student, student_vae, &data.test)?;

    let mut selected_per_class = vec![0usize; NUM_CLASSES];
    for sel in &selected {
        selected_per_class[sel.predicted_class] += 1;
    }
    let pseudo_label_accuracy = if selected.is_empty() {
        None
    } else {
        let mut correct = 0usize;
        let mut total = 0usize;
        for sel in &selected {
            let truth = data
                .unlabeled
                .iter()
                .find(|u| u.map.id == sel.example_id)
                .and_then(|u| u.true_label_for_evaluation());
            if let Some(truth) = truth {
                total += 1;
                if truth == sel.predicted_class {
                    correct += 1;
                }
            }
        }
        if total == 0 { None } else { Some(correct as f64 / total as f64) }
    };

    let report = PipelineReport {
        seed: config.seed,
        config: config.clone(),
        teacher_metrics,
        student_metrics,
        selected_per_class,
        pseudo_label_count: selected.len(),
        pseudo_label_accuracy,
    };
    Ok(PipelineOutcome { teacher, student, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pl(id: &str, class: usize, conf: f64) -> PseudoLabel {
        PseudoLabel { example_id: id.into(), predicted_class: class, confidence: conf }
    }

    #[test]
    fn select_topk_all_below_threshold() {
        let pseudo = vec![pl("a", 0, 0.5), pl("b", 1, 0.89)];
        assert!(select_topk(&pseudo, 10, 0.9).is_empty());
    }

    #[test]
    fn select_topk_k_exceeds_supply() {
        let pseudo = vec![pl("a", 2, 0.95), pl("b", 2, 0.92), pl("c", 2, 0.99)];
        let sel = select_topk(&pseudo, 10, 0.9);
        assert_eq!(sel.len(), 3);
        assert_eq!(sel[0].example_id, "c");
        assert_eq!(sel[2].example_id, "b");
    }

    #[test]
    fn select_topk_ties_break_by_id() {
        let pseudo = vec![pl("z", 1, 0.95), pl("a", 1, 0.95), pl("m", 1, 0.95)];
        let sel = select_topk(&pseudo, 2, 0.9);
        assert_eq!(sel.len(), 2);
        assert_eq!(sel[0].example_id, "a");
        assert_eq!(sel[1].example_id, "m");
    }

    #[test]
    fn select_topk_idempotent_and_monotone() {
        let pseudo: Vec<PseudoLabel> = (0..50)
            .map(|i| pl(&format!("e{i:02}"), i % 9, 0.85 + 0.003 * (i % 40) as f64))
            .collect();
        let sel = select_topk(&pseudo, 3, 0.9);
        assert_eq!(select_topk(&sel, 3, 0.9), sel);
        for t in [0.9, 0.92, 0.95, 0.97] {
            let lower = select_topk(&pseudo, 3, t);
            let higher = select_topk(&pseudo, 3, t + 0.02);
            assert!(higher.len() <= lower.len());
        }
    }

    #[test]
    fn config_validation_bounds() {
        let mut cfg = PipelineConfig {
            confidence_threshold: 0.9,
            top_k: 50,
            teacher: NetworkConfig::default(),
            student: NetworkConfig::default(),
            teacher_train: TrainConfig::default(),
            student_train: TrainConfig::default(),
            fine_tune_epochs: 5,
            seed: 0,
        };
        assert!(cfg.validate().is_ok());
        cfg.confidence_threshold = 0.05;
        assert!(cfg.validate().is_err());
        cfg.confidence_threshold = 1.0;
        assert!(cfg.validate().is_err());
        cfg.confidence_threshold = 0.9;
        cfg.top_k = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn build_student_set_contract() {
        use crate::data::{generate_batch, split};
        let maps = generate_batch(&[4; 9], 27, 0.02, 5).unwrap();
        let s = split(&maps, (0.4, 0.4, 0.2), 1).unwrap();
        // empty selection → original labeled set
        let set = build_student_set(&s.labeled, &[], &s.unlabeled).unwrap();
        assert_eq!(set.len(), s.labeled.len());
        assert!(set.iter().all(|e| !e.pseudo_labeled));

        let selected = vec![PseudoLabel {
            example_id: s.unlabeled[0].map.id.clone(),
            predicted_class: 7,
            confidence: 0.99,
        }];
        let set = build_student_set(&s.labeled, &selected, &s.unlabeled).unwrap();
        assert_eq!(set.len(), s.labeled.len() + 1);
        let added = set.iter().find(|e| e.pseudo_labeled).unwrap();
        assert_eq!(added.map.label, Some(7));

        let bogus = vec![pl("missing", 0, 0.99)];
        assert!(build_student_set(&s.labeled, &bogus, &s.unlabeled).is_err());
    }
}
