#![allow(dead_code)]

use std::path::Path;

use dspo_annotation::{CandidateCrop, TaskSpec};

/// Writes tiny placeholder crops and returns a 4-candidate task spec.
pub fn task_spec(files: &Path, lq_id: &str, instance_id: usize) -> TaskSpec {
    let dir = files.join(lq_id).join(format!("inst{instance_id}"));
    std::fs::create_dir_all(&dir).unwrap();
    let mut candidates = Vec::new();
    for (i, label) in ["step-20", "step-80", "cfg-4.5", "cfg-10.5"].iter().enumerate() {
        let rel = format!("{lq_id}/inst{instance_id}/{label}.png");
        std::fs::write(files.join(&rel), b"png").unwrap();
        candidates.push(CandidateCrop {
            label: label.to_string(),
            image: rel,
            caption: format!("smooth-red busy-blue-{i}"),
            full_image: format!("candidates/{lq_id}/{label}.png"),
        });
    }
    let lq = format!("{lq_id}/inst{instance_id}/lq.png");
    std::fs::write(files.join(&lq), b"png").unwrap();
    TaskSpec {
        lq_id: lq_id.into(),
        instance_id,
        lq_crop: lq,
        gt_reference: None,
        candidates,
        mask_path: format!("segment/{lq_id}.png"),
        weight: 0.25,
    }
}
