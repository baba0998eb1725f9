use std::collections::BTreeSet;

use golomb::assembly::AssemblyConfig;
use golomb::evaluation::JointMode;
use golomb::pipeline::{build_tokenizer, evaluate};
use golomb::schema::{SchemaIndex, Speaker};
use golomb::synth::{synth_dataset, SynthConfig};
use golomb::tracker::{DecodingConfig, OracleScorer, Tracker};

#[test]
fn oracle_tracking_reproduces_gold_states() {
    let cfg = SynthConfig { dialogues_per_service: 30, domain_switch_fraction: 0.3, ..Default::default() };
    let ds = synth_dataset(&cfg).unwrap();
    let tok = build_tokenizer(&ds.dev.schemas, &ds.dev.dialogues, 5000).unwrap();
    let index = SchemaIndex::new(&ds.dev.schemas);
    let tracker = Tracker {
        schemas: &index,
        assembly: &AssemblyConfig::default(),
        decoding: &DecodingConfig::default(),
        tokenizer: &tok,
    };
    let (report, predicted) =
        evaluate(&tracker, &OracleScorer, &ds.dev.dialogues, &BTreeSet::new(), JointMode::Strict).unwrap();
    for (g, p) in ds.dev.dialogues.iter().zip(&predicted) {
        for (gt, pt) in g.turns.iter().zip(&p.turns) {
            if gt.speaker == Speaker::User {
                assert_eq!(gt.frames, pt.frames, "{}", g.dialogue_id);
            }
        }
    }
    assert_eq!(report.joint_goal_accuracy, 1.0);
}
