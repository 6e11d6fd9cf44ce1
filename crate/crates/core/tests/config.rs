use eri_core::config::{RunConfig, KEYS};
use eri_core::metrics::LossKind;
use eri_core::Error;
use proptest::prelude::*;

#[test]
fn overrides_apply_over_defaults() {
    let cfg = RunConfig::parse_text("# run\n\nloss = ccc\nlr=0.01\nsteps=500\ninput_size=1x16x16\n").unwrap();
    assert_eq!(cfg.loss, LossKind::Ccc);
    assert_eq!(cfg.lr, 0.01);
    assert_eq!(cfg.steps, 500);
    assert_eq!(cfg.input_size, (1, 16, 16));
    assert_eq!(cfg.batch_size, RunConfig::default().batch_size);
}

#[test]
fn display_lists_every_key_once() {
    let text = RunConfig::default().to_string();
    let keys: Vec<&str> = text.lines().map(|l| l.split_once('=').unwrap().0).collect();
    assert_eq!(keys, KEYS);
}

#[test]
fn malformed_documents_are_rejected() {
    for doc in ["lr\n", "colour=blue\n", "lr=fast\n", "stage_channels=1,2,3\n", "version=9\n", "loss=mse\n"] {
        assert!(RunConfig::parse_text(doc).is_err(), "{doc:?}");
    }
}

#[test]
fn validation_names_the_offending_setting() {
    let cases = [
        ("batch_size=1", "batch_size"),
        ("lr=-1", "lr"),
        ("epochs=0\nsteps=0", "epoch"),
        ("lstm_hidden=0", "lstm"),
    ];
    for (doc, needle) in cases {
        match RunConfig::parse_text(doc).unwrap().validate() {
            Err(Error::ConfigInvalid(msg)) => assert!(msg.contains(needle), "{doc}: {msg}"),
            other => panic!("{doc}: expected ConfigInvalid, got {other:?}"),
        }
    }
    assert!(RunConfig::default().validate().is_ok());
}

proptest! {
    #[test]
    fn text_form_round_trips(
        lr in 0.0f64..1.0,
        hidden in 1usize..128,
        steps in 0usize..10_000,
        seed in any::<u64>(),
        ccc in any::<bool>(),
    ) {
        let cfg = RunConfig {
            lr,
            lstm_hidden: hidden,
            steps,
            seed,
            loss: if ccc { LossKind::Ccc } else { LossKind::Pcc },
            ..RunConfig::default()
        };
        let back = RunConfig::parse_text(&cfg.to_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
