use std::path::Path;

use proptest::prelude::*;
use spider::config::RunConfig;
use spider::synth::TaskId;
use spider::Error;

const LINES: [&str; 8] = [
    "seed = 11",
    "tasks = TEXTURE, EDGE",
    "epochs = 3",
    "lr = 0.0005",
    "strategy = random_unify",
    "distance = cosine",
    "g_list = 1, 4",
    "hflip = false",
];

#[test]
fn canonical_settings_parse_back_to_the_same_config() {
    let cfg = RunConfig::parse(&LINES.join("\n"), Path::new("/tmp")).unwrap();
    let text: String = cfg
        .canonical()
        .iter()
        .filter(|(k, _)| !["out_dir", "checkpoint", "prompts_dir"].contains(k))
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    let back = RunConfig::parse(&text, Path::new("/elsewhere")).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest(), cfg.digest());
    assert_eq!(cfg.digest().len(), 16);
}

#[test]
fn invalid_values_are_config_errors() {
    for text in [
        "seed = -1",
        "tasks = BRIGHT, PURPLE",
        "kernels = 3, 4",
        "distractor_rate = 1.5",
        "g = 0",
        "n_train = 2",
        "seed = 1\nseed = 2",
        "just words",
    ] {
        assert!(matches!(RunConfig::parse(text, Path::new(".")), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn held_out_tasks_get_no_distractors() {
    let cfg = RunConfig::parse("tasks = BRIGHT, DARK\nnew_tasks = EDGE", Path::new(".")).unwrap();
    assert_eq!(cfg.task_config(TaskId::Dark).distractors, vec![TaskId::Bright, TaskId::Dark]);
    assert!(cfg.task_config(TaskId::Edge).distractors.is_empty());
    assert_eq!(cfg.task_config(TaskId::Edge).distractor_rate, cfg.distractor_rate);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn digest_ignores_line_order_and_comments(order in Just((0..LINES.len()).collect::<Vec<_>>()).prop_shuffle()) {
        let base = RunConfig::parse(&LINES.join("\n"), Path::new(".")).unwrap();
        let text: String = order.iter().map(|&i| format!("  {}   # note {i}\n\n", LINES[i])).collect();
        let shuffled = RunConfig::parse(&text, Path::new(".")).unwrap();
        prop_assert_eq!(shuffled.digest(), base.digest());
    }

    #[test]
    fn any_seed_changes_the_digest(seed in 0u64..u64::MAX) {
        let mut a = RunConfig::default();
        let b = RunConfig::default();
        a.apply_seed_override(Some(&seed.to_string())).unwrap();
        prop_assert_eq!(a.seed, seed);
        prop_assert_eq!(a.digest() == b.digest(), seed == b.seed);
    }
}
