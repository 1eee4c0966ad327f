//! One desk-scale boundary-constrained run through every subcommand, checked
//! against values recomputed from the dumped files and the library.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Command;

use rbfood::config::Config;
use rbfood::metrics::{auroc, average_precision, fpr_at_tpr, ScoredSample};
use rbfood::nn::read_checkpoint;
use rbfood::propseg::PropSegModel;
use rbfood::synthbench::{
    feature_recipe, is_unknown, read_dataset, PixelLabel, Proposal, Split, SynthDataset, LABEL_SIZE,
};

const DESK_CONFIG: &str = include_str!("../../../configs/desk.conf");

fn rbfood(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_rbfood"))
        .args(args)
        .output()
        .expect("spawn rbfood");
    assert!(
        out.status.success(),
        "rbfood {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn step(root: &Path, config: &Path, cmd: &str, out: &str, extra: &[&str]) -> PathBuf {
    let dir = root.join(out);
    let mut args = vec![
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "0",
        "--out",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    rbfood(&args);
    dir
}

fn csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| {
            header
                .iter()
                .map(|h| h.to_string())
                .zip(l.split(',').map(str::to_string))
                .collect()
        })
        .collect()
}

fn summary(dir: &Path) -> BTreeMap<String, f64> {
    csv(&dir.join("summary.csv"))
        .into_iter()
        .filter_map(|r| r["value"].parse().ok().map(|v| (r["metric"].clone(), v)))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn load_segmenter(dir: &Path) -> PropSegModel {
    let mut records: VecDeque<_> = read_checkpoint(&mut BufReader::new(File::open(dir.join("propseg.ckpt")).unwrap()))
        .unwrap()
        .into();
    PropSegModel::from_records(&mut records).unwrap()
}

fn render(data: &SynthDataset, indices: &[usize], recipe: &str) -> Vec<Proposal> {
    let recipe = feature_recipe(recipe).unwrap();
    indices
        .iter()
        .map(|&i| data.render(i, recipe.as_ref()).unwrap())
        .collect()
}

fn check_segmenter(data: &SynthDataset, seg: &PropSegModel) {
    let train = render(data, &data.indices(Split::Train), &seg.recipe);
    let mut hits = 0.0;
    let mut total = 0.0;
    for p in &train {
        let out = seg.segment(p, 0).unwrap();
        for i in 0..LABEL_SIZE * LABEL_SIZE {
            if let PixelLabel::Class(c) = p.label(i) {
                total += 1.0;
                hits += (out.class_map[i] == c) as u8 as f64;
            }
        }
    }
    assert!(hits / total >= 0.9, "train pixel accuracy {}", hits / total);

    let test = render(data, &data.indices(Split::TestKnown), &seg.recipe);
    let (mut band, mut inside) = (Vec::new(), Vec::new());
    for p in &test {
        let out = seg.segment(p, 0).unwrap();
        for i in 0..LABEL_SIZE * LABEL_SIZE {
            match p.label(i) {
                PixelLabel::Boundary(_) => band.push(out.u_seg[i]),
                PixelLabel::Class(c) if !is_unknown(c) => inside.push(out.u_seg[i]),
                _ => {}
            }
        }
    }
    assert!(
        mean(&band) > mean(&inside),
        "boundary {} vs in-distribution {}",
        mean(&band),
        mean(&inside)
    );
}

fn fmt(v: rbfood::Result<f64>) -> String {
    v.map_or_else(|_| "nan".to_string(), |v| format!("{v:.6}"))
}

fn check_proposal_rows(eval: &Path) {
    let mut raw: BTreeMap<String, Vec<ScoredSample>> = BTreeMap::new();
    for r in csv(&eval.join("raw_scores.csv")) {
        raw.entry(r["proposal_id"].clone())
            .or_default()
            .push(ScoredSample::new(r["score"].parse().unwrap(), r["label"] == "1"));
    }
    let rows = csv(&eval.join("proposals.csv"));
    assert!(!rows.is_empty());
    for row in rows {
        let s = raw.remove(&row["proposal_id"]).unwrap_or_default();
        assert_eq!(row["auroc"], fmt(auroc(&s)), "proposal {}", row["proposal_id"]);
        assert_eq!(row["ap"], fmt(average_precision(&s)), "proposal {}", row["proposal_id"]);
        assert_eq!(
            row["fpr95"],
            fmt(fpr_at_tpr(&s, 0.95)),
            "proposal {}",
            row["proposal_id"]
        );
    }
    assert!(
        raw.is_empty(),
        "raw scores for proposals without a row: {:?}",
        raw.keys()
    );
}

fn check_classifier(eval: &Path) {
    assert!(summary(eval)["cls_accuracy"] >= 0.9);
    let rows = csv(&eval.join("classification.csv"));
    let u = |split: &str| -> Vec<f64> {
        rows.iter()
            .filter(|r| r["split"] == split)
            .map(|r| r["u_cls"].parse().unwrap())
            .collect()
    };
    let (ood, known) = (u(Split::TestOod.name()), u(Split::TestKnown.name()));
    assert!(
        mean(&ood) > mean(&known),
        "u_cls ood {} vs known {}",
        mean(&ood),
        mean(&known)
    );
}

#[test]
fn boundary_model_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut config = Config::parse(DESK_CONFIG).unwrap();
    config.set("propseg.regularizer", "boundary").unwrap();
    let config_path = root.join("desk.conf");
    fs::write(&config_path, config.render()).unwrap();

    let data_dir = step(root, &config_path, "gen-data", "data", &[]);
    let data_file = data_dir.join("dataset.bin");
    let data = data_file.to_str().unwrap();
    let seg_dir = step(root, &config_path, "train-propseg", "seg", &["--data", data]);
    let seg = seg_dir.join("propseg.ckpt");
    let seg = seg.to_str().unwrap();
    let cls_dir = step(
        root,
        &config_path,
        "train-propcls",
        "cls",
        &["--data", data, "--propseg", seg],
    );
    let cls = cls_dir.join("propcls.ckpt");
    let cls = cls.to_str().unwrap();
    let eval = step(
        root,
        &config_path,
        "eval-proposals",
        "eval",
        &["--data", data, "--propseg", seg, "--propcls", cls],
    );
    let flags = step(
        root,
        &config_path,
        "flag-detections",
        "flags",
        &["--data", data, "--propseg", seg, "--propcls", cls],
    );

    let dataset = read_dataset(&mut BufReader::new(File::open(&data_file).unwrap())).unwrap();
    check_segmenter(&dataset, &load_segmenter(&seg_dir));
    check_proposal_rows(&eval);
    check_classifier(&eval);
    let rate = summary(&flags)["flag_rate_mislabeled"];
    assert!(rate >= 0.8, "flag rate on mislabeled detections {rate}");
}
