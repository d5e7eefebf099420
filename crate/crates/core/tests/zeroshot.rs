use robust_adapt::dataio::generate_synthetic;
use robust_adapt::metrics::evaluate_groups;
use robust_adapt::zeroshot::{zeroshot_labels, ZeroShotHead};
use robust_adapt::{presets, ShiftSpec, Split};

fn zero_shot_gap(spec: &ShiftSpec) -> f64 {
    let b = generate_synthetic(spec).unwrap();
    let head = ZeroShotHead::from_bundle(&b, 0.01).unwrap();
    let test = b.split_view(Split::Test);
    let preds = zeroshot_labels(&head, &b.samples.select_rows(&test)).unwrap();
    let y: Vec<usize> = test.iter().map(|&i| b.class_labels[i]).collect();
    let g: Vec<usize> = test.iter().map(|&i| b.group_labels[i]).collect();
    evaluate_groups(&preds, &y, &g).unwrap().gap
}

#[test]
fn confounded_prompts_open_a_gap() {
    assert!(zero_shot_gap(&presets::s1()) >= 0.30);
}

#[test]
fn aligned_prompts_close_the_gap() {
    let spec = ShiftSpec {
        spurious_mix: 0.0,
        ..presets::s1()
    };
    let gap = zero_shot_gap(&spec);
    assert!(gap <= 0.05, "{gap}");
}
