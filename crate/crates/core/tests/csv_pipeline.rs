use edgeml_core::metrics::{completion_latency, read_metrics_csv, write_metrics_csv, write_summary_csv};
use edgeml_core::{parse_config_str, run_experiment, set_param, SummaryRow};

const CFG: &str = r#"{
    "model": {"layer_widths": [3, 8, 3]},
    "data": {"source": {"kind": "blobs", "labels": 3, "per_class": 30, "dim": 3}, "devices": 4, "test_per_class": 10},
    "protocol": {"kind": "fsvrg", "hyper": {"eta": 0.2, "tau": 2}},
    "links": {"loss_prob": 0.1},
    "rounds": 12,
    "target_loss": 0.9,
    "seed": 4
}"#;

#[test]
fn summary_is_recomputable_from_the_csv() {
    let cfg = parse_config_str(CFG).unwrap();
    let records = run_experiment(&cfg).unwrap();
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &records).unwrap();
    let back = read_metrics_csv(buf.as_slice()).unwrap();
    assert_eq!(back, records);
    let row = SummaryRow::from_run(0.2, &back, cfg.target_loss);
    assert_eq!(row, SummaryRow::from_run(0.2, &records, cfg.target_loss));
    assert_eq!(row.completion_latency_s, completion_latency(&records, 0.9));
    assert_eq!(row.cum_bits_up, records.last().unwrap().cum_bits_up);
    let mut out = Vec::new();
    write_summary_csv(&mut out, &[row]).unwrap();
    assert!(String::from_utf8(out).unwrap().starts_with("param_value,final_test_acc,completion_latency_s,cum_bits_up\n"));
}

#[test]
fn config_round_trip_and_param_edit() {
    let cfg = parse_config_str(CFG).unwrap();
    assert_eq!(parse_config_str(&cfg.to_json()).unwrap(), cfg);
    let edited = set_param(&cfg, "links.loss_prob", 0.3).unwrap();
    assert_eq!(edited.links.loss_prob, 0.3);
    assert_eq!(parse_config_str(&edited.to_json()).unwrap(), edited);
    assert!(set_param(&cfg, "links.nope", 1.0).is_err());
}

#[test]
fn bits_do_not_depend_on_the_learning_rate() {
    let cfg = parse_config_str(CFG).unwrap();
    let bits = |eta: f64| {
        let c = set_param(&cfg, "protocol.hyper.eta", eta).unwrap();
        let r = run_experiment(&c).unwrap();
        r.iter().map(|x| (x.cum_bits_up, x.cum_bits_down)).collect::<Vec<_>>()
    };
    assert_eq!(bits(0.05), bits(0.5));
}
