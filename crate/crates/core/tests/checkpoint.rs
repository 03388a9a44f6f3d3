mod common;

use common::{toy_backbone, toy_data};
use dcmix::model::{Model, ModelKind};
use dcmix::train::*;
use dcmix::Error;
use serde_json::json;

fn trained(kind: ModelKind) -> TrainResult<f32> {
    let data = toy_data(32, 1);
    let m = Model::<f32>::build(kind, &toy_backbone(8, 2), 3, 9).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 8, patience: 0, ..TrainConfig::default() };
    train(m, &data, Some(&data), &cfg).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let echo = json!({"data": {"seed": 4}, "model": {"kind": "dcmix"}});
    for kind in [ModelKind::Plain, ModelKind::Dcmix, ModelKind::Attention] {
        let r = trained(kind);
        let bytes = encode_checkpoint(&r, &echo).unwrap();
        let back: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.result.model, r.model);
        assert_eq!(back.result.history, r.history);
        assert_eq!(back.result.alpha_trajectory, r.alpha_trajectory);
        assert_eq!(back.result.wall_clock_seconds, None);
        assert_eq!(back.run_config, echo);
        assert_eq!(encode_checkpoint(&back.result, &back.run_config).unwrap(), bytes);
    }
}

#[test]
fn loaded_model_reproduces_metrics() {
    let data = toy_data(64, 11);
    let r = trained(ModelKind::Dcmix);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&r, &serde_json::Value::Null, &path).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(evaluate(&back.result.model, &data, 1).unwrap(), evaluate(&r.model, &data, 1).unwrap());
}

#[test]
fn damage_is_detected() {
    let bytes = encode_checkpoint(&trained(ModelKind::Dcmix), &serde_json::Value::Null).unwrap();
    assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 10]), Err(Error::Corrupt(_))));

    let mut flipped = bytes.clone();
    let at = bytes.len() - 40;
    flipped[at] ^= 0x10;
    match decode_checkpoint::<f32>(&flipped) {
        Err(Error::Corrupt(msg)) => assert!(msg.contains("checksum"), "{msg}"),
        other => panic!("expected corrupt record, got {other:?}"),
    }

    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(decode_checkpoint::<f32>(&versioned), Err(Error::Version { found: 7, expected: 1 })));

    assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Format(_))));
}
