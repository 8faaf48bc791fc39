use dra_core::cost::{planned_cost, preset};
use dra_core::model::{Model, ModelConfig};
use dra_core::trace::{export_csv, export_pgm, export_sweep_csv, export_sweep_svg, parse_csv, parse_pgm, SweepPoint};
use dra_core::{ForwardOptions, PreservationPolicy, PreservationTrace, PruneMode};
use proptest::prelude::*;

fn model() -> Model<f32> {
    Model::init(ModelConfig {
        d_model: 16,
        n_layers: 4,
        n_heads: 2,
        d_mlp: 32,
        ..ModelConfig::gpt2_nano()
    })
    .unwrap()
}

fn text(n: usize) -> Vec<u32> {
    (0..n).map(|i| ((i * 31 + 7) % 97) as u32).collect()
}

fn trace_of(m: &Model<f32>, n: usize, alpha: f64, mode: PruneMode) -> PreservationTrace {
    let policy = PreservationPolicy::new(alpha, 3).unwrap().with_mode(mode);
    m.forward(&text(n), &policy, &ForwardOptions::eval()).unwrap().trace
}

fn sweep_points() -> Vec<SweepPoint> {
    let p = preset("gemma2-2b").unwrap();
    [1.0, 0.95, 0.9, 0.8, 0.6, 0.4, 0.2, 0.05]
        .iter()
        .map(|&alpha| {
            let r = planned_cost(&p, 512, 0, &PreservationPolicy::new(alpha, 5).unwrap());
            SweepPoint {
                series: "gemma2-2b".into(),
                alpha,
                speedup: r.speedup_macs,
                metric: alpha.sqrt(),
                memory_ratio: r.memory_ratio,
            }
        })
        .collect()
}

#[test]
fn model_traces_form_subset_chains() {
    let m = model();
    for alpha in [1.0, 0.7, 0.4, 0.1] {
        let t = trace_of(&m, 50, alpha, PruneMode::Monotonic);
        assert!(t.is_subset_chain());
        assert!(t.rows()[0].iter().all(|&k| k));
        let c = t.counts();
        assert!(c.windows(2).all(|w| w[1] <= w[0]), "{c:?}");
        for (row, &count) in t.rows().iter().zip(&c) {
            assert_eq!(row.iter().filter(|&&k| k).count(), count);
        }
    }
}

#[test]
fn csv_and_pgm_decode_to_the_same_grid() {
    let m = model();
    for mode in [PruneMode::Monotonic, PruneMode::Rescoring] {
        let t = trace_of(&m, 37, 0.45, mode);
        let csv = export_csv(&t).unwrap();
        let pgm = export_pgm(&t).unwrap();
        assert_eq!(csv.lines().count(), 1 + t.n_layers() * t.seq_len());
        let a = parse_csv(&csv).unwrap();
        let b = parse_pgm(&pgm).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, t.layer_grid());
        let header: Vec<&str> = pgm.split_whitespace().take(4).collect();
        assert_eq!(header, ["P2", "37", &t.n_layers().to_string(), "255"]);
    }
}

#[test]
fn exports_are_byte_deterministic() {
    let runs: Vec<(String, String)> = (0..3)
        .map(|_| {
            let t = trace_of(&model(), 64, 0.3, PruneMode::Monotonic);
            (export_csv(&t).unwrap(), export_pgm(&t).unwrap())
        })
        .collect();
    assert!(runs.windows(2).all(|w| w[0] == w[1]));
    let pts = sweep_points();
    assert_eq!(export_sweep_svg(&pts, "accuracy").unwrap(), export_sweep_svg(&pts, "accuracy").unwrap());
    assert_eq!(export_sweep_csv(&pts), export_sweep_csv(&pts));
}

#[test]
fn full_rate_pgm_is_all_dark() {
    let t = trace_of(&model(), 20, 1.0, PruneMode::Monotonic);
    let pgm = export_pgm(&t).unwrap();
    assert!(pgm.split_whitespace().skip(4).all(|v| v == "0"));
}

fn panels(svg: &str) -> Vec<Vec<(f64, f64)>> {
    let doc = roxmltree::Document::parse(svg).expect("well-formed XML");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    doc.root_element()
        .children()
        .filter(|n| n.has_tag_name("g"))
        .map(|g| {
            g.children()
                .filter(|n| n.has_tag_name("circle"))
                .map(|c| (c.attribute("cx").unwrap().parse().unwrap(), c.attribute("cy").unwrap().parse().unwrap()))
                .collect()
        })
        .collect()
}

#[test]
fn sweep_svg_is_well_formed_with_three_panels() {
    let svg = export_sweep_svg(&sweep_points(), "acc <&>").unwrap();
    let p = panels(&svg);
    assert_eq!(p.len(), 3);
    assert!(p.iter().all(|markers| markers.len() == 8));
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 3);
    let labels: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
    for want in ["acc <&>", "memory ratio", "alpha", "speedup (MACs)"] {
        assert!(labels.contains(&want), "missing label {want}");
    }
}

#[test]
fn alpha_panel_falls_as_speedup_rises() {
    let svg = export_sweep_svg(&sweep_points(), "accuracy").unwrap();
    let mut alpha = panels(&svg)[2].clone();
    alpha.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Screen y grows downward, so a falling α means a growing cy.
    assert!(alpha.windows(2).all(|w| w[1].1 >= w[0].1), "{alpha:?}");
}

#[test]
fn single_point_and_empty_tables() {
    let one = vec![sweep_points()[0].clone()];
    let p = panels(&export_sweep_svg(&one, "accuracy").unwrap());
    assert!(p.iter().all(|markers| markers.len() == 1));
    assert!(export_sweep_svg(&[], "accuracy").is_err());
}

proptest! {
    #[test]
    fn csv_round_trips(rows in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 1..12), 1..6)) {
        let w = rows[0].len();
        let rows: Vec<Vec<bool>> = rows.into_iter().map(|mut r| { r.resize(w, false); r }).collect();
        let mut full = vec![vec![true; w]];
        full.extend(rows.clone());
        let t = PreservationTrace::from_rows(w, rows.len(), full).unwrap();
        prop_assert_eq!(parse_csv(&export_csv(&t).unwrap()).unwrap(), t.layer_grid());
        prop_assert_eq!(parse_pgm(&export_pgm(&t).unwrap()).unwrap(), t.layer_grid());
    }
}
