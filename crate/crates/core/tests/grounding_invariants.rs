mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use instmap::features::aggregate_all;
use instmap::grounding::llm::{ScriptFile, ScriptSession};
use instmap::grounding::{
    ground_instruction, load_trace, save_trace, GroundingOptions, InstanceMap, KdTree, LabelTable,
    LlmClient, ScriptedLlm, SyntheticTextEmbedder, TextEmbedder, TraceFile, TRACE_FORMAT,
};
use instmap::merging::run_pipeline;
use instmap::scene::manifest::{LabelEntry, LabelFile};
use instmap::Config;

struct Setup {
    map: InstanceMap<f64>,
    labels: LabelTable<f64>,
    embedder: SyntheticTextEmbedder,
    cfg: Config,
}

fn setup(seed: u64) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::default();
    cfg.frame_stride = 1;
    let scene = common::build_scene(dir.path(), &common::oracle_scene_spec(seed), &cfg);
    let mut instances = run_pipeline(&scene, &cfg).unwrap();
    assert!(instances.len() >= 2, "need at least two instances to rank");
    let provider = common::SeededCropProvider { dim: scene.feature_dim, seed };
    aggregate_all(&mut instances, &scene, &provider, &cfg).unwrap();
    let feature_dim = scene.feature_dim;
    let embedder = SyntheticTextEmbedder::new(seed ^ 0x7e7, feature_dim);
    let label_file = LabelFile {
        labels: vec![
            LabelEntry { label_id: 0, name: "chair".into() },
            LabelEntry { label_id: 1, name: "table".into() },
            LabelEntry { label_id: 2, name: "ball".into() },
        ],
    };
    let labels = LabelTable::build(&label_file, &embedder).unwrap();
    Setup { map: InstanceMap::new(instances, feature_dim), labels, embedder, cfg }
}

/// Scaling the query vector by any positive factor reorders nothing.
#[test]
fn ranking_ignores_query_scale() {
    let s = setup(13);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1e);
    for _ in 0..25 {
        let q: Vec<f64> = (0..s.map.feature_dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        let scaled: Vec<f64> = q.iter().map(|v| v * 7.5).collect();
        let a = s.map.rank_candidates(&q, s.cfg.candidates);
        let b = s.map.rank_candidates(&scaled, s.cfg.candidates);
        let ids = |r: &[(f64, usize)]| r.iter().map(|&(_, i)| i).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b), "order moved under positive scaling");
        for ((sa, _), (sb, _)) in a.iter().zip(&b) {
            assert!((sa - sb).abs() < 1e-9, "similarity drifted: {sa} vs {sb}");
        }
    }
}

/// The label table decorates prompts; it must not touch similarities,
/// candidate order, or the chosen instance when selection is scripted to a
/// fixed answer.
#[test]
fn label_table_changes_prompt_text_only() {
    let s = setup(13);
    let opts = GroundingOptions { parsing: false, selection: true };
    let script = || {
        ScriptedLlm::from_script(ScriptFile {
            sessions: vec![ScriptSession { instruction: None, replies: vec!["1".into()] }],
        })
    };

    let mut llm_a = script();
    let with_labels = ground_instruction(
        &s.map,
        Some(&s.labels),
        "find the round thing",
        &s.embedder,
        Some(&mut llm_a as &mut dyn LlmClient),
        &s.cfg,
        opts,
    )
    .unwrap();
    let mut llm_b = script();
    let without = ground_instruction(
        &s.map,
        None,
        "find the round thing",
        &s.embedder,
        Some(&mut llm_b as &mut dyn LlmClient),
        &s.cfg,
        opts,
    )
    .unwrap();

    assert_eq!(with_labels.chosen_instance, without.chosen_instance);
    assert_eq!(with_labels.attempts, without.attempts);
    assert_eq!(with_labels.candidates.len(), without.candidates.len());
    for (a, b) in with_labels.candidates.iter().zip(&without.candidates) {
        assert_eq!(a.instance_id, b.instance_id);
        assert_eq!(a.similarity, b.similarity);
        assert_eq!(a.center, b.center);
        assert_eq!(a.cells, b.cells);
    }
    // The prompt is where labels are allowed to show up.
    let pa = with_labels.round2_prompt.as_deref().unwrap();
    let pb = without.round2_prompt.as_deref().unwrap();
    assert_ne!(pa, pb, "labeled and unlabeled prompts should differ");
}

/// Two runs with identical inputs produce identical records, down to the
/// serialized bytes, and traces survive a save/load/save cycle unchanged.
#[test]
fn scripted_grounding_is_reproducible() {
    let s = setup(13);
    let opts = GroundingOptions { parsing: true, selection: true };
    let script = || {
        ScriptedLlm::from_script(ScriptFile {
            sessions: vec![ScriptSession {
                instruction: None,
                replies: vec!["a round object".into(), "2".into()],
            }],
        })
    };

    let run = || {
        let mut llm = script();
        ground_instruction(
            &s.map,
            Some(&s.labels),
            "walk to the round one",
            &s.embedder,
            Some(&mut llm as &mut dyn LlmClient),
            &s.cfg,
            opts,
        )
        .unwrap()
    };
    let first = run();
    let second = run();
    let ser = |r| toml::to_string(&TraceFile {
        format: TRACE_FORMAT.to_string(),
        map: "m".into(),
        text_embedder: TextEmbedder::<f64>::tag(&s.embedder),
        llm: Some("scripted".into()),
        parsing: true,
        selection: true,
        config: s.cfg.to_raw(),
        groundings: vec![r],
    })
    .unwrap();
    let bytes_a = ser(first.clone());
    let bytes_b = ser(second);
    assert_eq!(bytes_a, bytes_b, "grounding is not reproducible");

    let dir = tempfile::tempdir().unwrap();
    let path_a = dir.path().join("a.toml");
    let path_b = dir.path().join("b.toml");
    std::fs::write(&path_a, &bytes_a).unwrap();
    let loaded = load_trace(&path_a).unwrap();
    save_trace(&path_b, &loaded).unwrap();
    // Serialization is canonical pretty-toml, so one cycle settles it.
    let resettled = load_trace(&path_b).unwrap();
    save_trace(&path_a, &resettled).unwrap();
    assert_eq!(std::fs::read(&path_a).unwrap(), std::fs::read(&path_b).unwrap());
}

/// Parsing disabled embeds the raw instruction; the record says so.
#[test]
fn options_control_round_structure() {
    let s = setup(13);
    let no_rounds = ground_instruction(
        &s.map,
        None,
        "anything",
        &s.embedder,
        None,
        &s.cfg,
        GroundingOptions { parsing: false, selection: false },
    )
    .unwrap();
    assert!(no_rounds.description.is_none());
    assert!(no_rounds.round1_prompt.is_none());
    assert!(no_rounds.round2_prompt.is_none());
    assert!(!no_rounds.llm_fallback);
    // Rank 1 is the choice when selection is off.
    assert_eq!(no_rounds.chosen_instance, no_rounds.candidates[0].instance_id);
    assert_eq!(no_rounds.attempts[0], no_rounds.candidates[0].center);
    assert_eq!(no_rounds.attempts.len(), no_rounds.candidates.len());

    // No LLM at all behaves like rank-1 fallback even when rounds are on.
    let fallback = ground_instruction(
        &s.map,
        None,
        "anything",
        &s.embedder,
        None,
        &s.cfg,
        GroundingOptions { parsing: true, selection: true },
    )
    .unwrap();
    assert_eq!(fallback.chosen_instance, no_rounds.chosen_instance);
}

/// The spatial context behind candidate prompts agrees with a brute-force
/// neighbor scan.
#[test]
fn kdtree_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b64);
    for _ in 0..20 {
        let n = rng.gen_range(1..=60usize);
        let pts: Vec<([f64; 3], u32)> = (0..n)
            .map(|i| {
                (
                    [
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    ],
                    i as u32,
                )
            })
            .collect();
        let tree = KdTree::build(pts.clone());
        for _ in 0..10 {
            let q = [
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            ];
            let radius = rng.gen_range(0.5..6.0);
            let mut got = tree.within_radius(&q, radius);
            got.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut want: Vec<(f64, u32)> = pts
                .iter()
                .filter_map(|(p, id)| {
                    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                        .sqrt();
                    (d <= radius).then_some((d, *id))
                })
                .collect();
            want.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            assert_eq!(got.len(), want.len());
            for ((gd, gi), (wd, wi)) in got.iter().zip(&want) {
                assert_eq!(gi, wi);
                assert!((gd - wd).abs() < 1e-9);
            }

            let k = rng.gen_range(1..=8usize);
            let got = tree.k_nearest(&q, k);
            assert_eq!(got.len(), k.min(n));
            for (i, (d, id)) in got.iter().enumerate() {
                assert_eq!(*id, want_nearest(&pts, &q, i).1, "rank {i}");
                assert!((d - want_nearest(&pts, &q, i).0).abs() < 1e-9);
            }
        }
    }
}

fn want_nearest(pts: &[([f64; 3], u32)], q: &[f64; 3], rank: usize) -> (f64, u32) {
    let mut all: Vec<(f64, u32)> = pts
        .iter()
        .map(|(p, id)| {
            let d =
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            (d, *id)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all[rank]
}
