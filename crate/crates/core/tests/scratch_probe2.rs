use cloudvision_core::eval::{run_ablation, MapVariant, PipelineConfig};
use cloudvision_core::retrieval::{compute_descriptor, query_top_k, DescriptorKind, RetrievalDatabase};
use cloudvision_core::synth::{Dataset, DatasetSpec};

fn retrieval_rate(ds: &Dataset, kind: DescriptorKind) -> f64 {
    let db = RetrievalDatabase::build(&ds.db_images, &ds.db_poses, kind).unwrap();
    let mut ok = 0;
    for (img, gt) in ds.query_images.iter().zip(&ds.query_gt) {
        let d = compute_descriptor(img, kind).unwrap();
        let top = query_top_k(&db, &d, 1).unwrap();
        let p = db.entries[top[0].0 as usize].timed_pose.pose.translation;
        if (p - gt.pose.translation).norm() <= 2.0 { ok += 1; }
    }
    100.0 * ok as f64 / ds.query_images.len() as f64
}

#[test]
fn seeds() {
    for seed in [0u64, 1, 2] {
        let spec = DatasetSpec::desk(seed);
        let ds = Dataset::generate(&spec).unwrap();
        let r_tiny = retrieval_rate(&ds, DescriptorKind::Tiny);
        let cfg = PipelineConfig::default();
        let out = run_ablation(MapVariant::IndexedMap, &ds, &cfg).unwrap();
        println!("seed {seed}: retr={r_tiny:.0}% | median t={:.4} r={:.3} recall={:.1}% | pts={}",
            out.report.median_trans_m, out.report.median_rot_deg, out.report.recall_at[0].1,
            out.points.structure_points);
    }
}
