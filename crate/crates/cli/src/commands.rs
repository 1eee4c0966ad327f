use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rbfood::config::Config;
use rbfood::metrics::{accuracy, auroc, average_precision, fpr_at_tpr, read_scores_csv, write_scores_csv, ScoredSample};
use rbfood::nn::{read_checkpoint, write_checkpoint, Record};
use rbfood::pipeline::{
    flag_uncertain_detections, image_pixel_samples, scene_ranked_proposals, synthetic_detections, whole_image_uncertainty,
    Detection,
};
use rbfood::propcls::{self, merge_label, PropClsModel};
use rbfood::propseg::{self, build_propseg_model, evaluation_indices, pixel_ood_samples, PropSegModel};
use rbfood::synthbench::{
    build_dataset, feature_recipe, read_dataset, write_dataset, write_index, Proposal, SceneSplit, Split,
    SynthDataset, CLASS_NAMES,
};
use rbfood::toy2d::{run_toy_experiment, toy_variant, uncertainty_grid, TOY_VARIANTS};
use rbfood::train::TrainLog;
use rbfood::{Error, Result};

use crate::Common;

fn io_at(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        None => Ok(Config::default()),
        Some(p) => Config::parse(&fs::read_to_string(p).map_err(|e| io_at(p, e))?),
    }
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().ok_or_else(|| Error::Config {
        key: "--out".into(),
        message: "an output directory is required".into(),
    })?;
    fs::create_dir_all(&dir).map_err(|e| io_at(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_at(path, e))
}

fn read_data(path: &Path) -> Result<SynthDataset> {
    let file = File::open(path).map_err(|e| io_at(path, e))?;
    read_dataset(&mut BufReader::new(file))
}

fn read_records(path: &Path) -> Result<VecDeque<Record>> {
    let file = File::open(path).map_err(|e| io_at(path, e))?;
    Ok(read_checkpoint(&mut BufReader::new(file))?.into())
}

fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_at(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, records)?;
    w.flush().map_err(|e| io_at(path, e))
}

fn load_propseg(path: &Path) -> Result<PropSegModel> {
    PropSegModel::from_records(&mut read_records(path)?)
}

fn load_propcls(path: &Path) -> Result<PropClsModel> {
    PropClsModel::from_records(&mut read_records(path)?)
}

fn class_name(c: Option<u8>) -> &'static str {
    c.map_or("background", |c| CLASS_NAMES[c as usize])
}

fn log_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,lr,l_in,l_bd,l_reg,total\n");
    for e in &log.epochs {
        let l = &e.loss;
        let _ = writeln!(s, "{},{:e},{:.6},{:.6},{:.6},{:.6}", e.epoch, e.learning_rate, l.l_in, l.l_bd, l.l_reg, l.total);
    }
    s
}

fn fmt_metric(v: Result<f64>) -> String {
    v.map_or_else(|_| "nan".to_string(), |v| format!("{v:.6}"))
}

/// `metric,value` lines for a set of scored samples.
fn metric_lines(samples: &[ScoredSample], tpr: f64) -> String {
    let fpr_name = if tpr == 0.95 { "fpr95".to_string() } else { format!("fpr_at_{tpr}") };
    format!(
        "auroc,{}\nap,{}\n{fpr_name},{}\n",
        fmt_metric(auroc(samples)),
        fmt_metric(average_precision(samples)),
        fmt_metric(fpr_at_tpr(samples, tpr))
    )
}

fn tpr(config: &Config) -> Result<f64> {
    let t: f64 = config.get("metrics.tpr")?;
    if t > 0.0 && t <= 1.0 {
        Ok(t)
    } else {
        Err(Error::Config {
            key: "metrics.tpr".into(),
            message: "must lie in (0, 1]".into(),
        })
    }
}

pub fn gen_data(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let dir = out_dir(common)?;
    let data = build_dataset(&config.bench()?, common.seed)?;
    write_records_like(&dir.join("dataset.bin"), |w| write_dataset(w, &data))?;
    write_records_like(&dir.join("index.csv"), |w| write_index(w, &data))
}

fn write_records_like(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_at(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| io_at(path, e))
}

pub fn toy2d(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let dir = out_dir(common)?;
    let (params, toy) = config.toy()?;
    let name: String = config.get("toy.variant")?;
    let variants = if name == "all" { TOY_VARIANTS.to_vec() } else { vec![toy_variant(&name)?] };
    let grid: usize = config.get("toy.grid")?;
    let mut summary = String::from("variant,train_accuracy,auroc,fpr95,ood_below_0.3\n");
    for v in variants {
        let (model, report) = run_toy_experiment(&params, v, &toy, common.seed)?;
        let _ = writeln!(
            summary,
            "{},{:.6},{:.6},{:.6},{:.6}",
            v.name, report.train_accuracy, report.auroc, report.fpr95, report.ood_below
        );
        let stem = v.name.replace('+', "_");
        write_text(&dir.join(format!("{stem}_scores.csv")), &write_scores_csv(&report.samples))?;
        let (lo, hi) = params.ood_box;
        let map = uncertainty_grid(&model, (lo, hi), (lo, hi), (grid, grid))?;
        write_text(&dir.join(format!("{stem}_grid.umap")), &map.to_text())?;
        write_text(&dir.join(format!("{stem}_grid.pgm")), &map.to_pgm())?;
    }
    write_text(&dir.join("summary.csv"), &summary)
}

pub fn train_propseg(common: &Common, data: &Path) -> Result<()> {
    let config = load_config(common)?;
    let dir = out_dir(common)?;
    let data = read_data(data)?;
    let cfg = config.propseg()?;
    let mut model = build_propseg_model(&cfg, common.seed)?;
    let log = propseg::train_propseg(&mut model, &data, &data.indices(Split::Train), &cfg, common.seed)?;
    write_records(&dir.join("propseg.ckpt"), &model.to_records())?;
    write_text(&dir.join("propseg_log.csv"), &log_csv(&log))
}

pub fn train_propcls(common: &Common, data: &Path, propseg: &Path) -> Result<()> {
    let config = load_config(common)?;
    let dir = out_dir(common)?;
    let data = read_data(data)?;
    let seg = load_propseg(propseg)?;
    let (model, log) = propcls::train_propcls(&seg, &data, &data.indices(Split::Train), &config.propcls()?, common.seed)?;
    write_records(&dir.join("propcls.ckpt"), &model.to_records())?;
    write_text(&dir.join("propcls_log.csv"), &log_csv(&log))
}

fn render_all(data: &SynthDataset, indices: &[usize], recipe: &str) -> Result<Vec<Proposal>> {
    let recipe = feature_recipe(recipe)?;
    indices.iter().map(|&i| data.render(i, recipe.as_ref())).collect()
}

pub fn eval_proposals(common: &Common, data: &Path, propseg: &Path, propcls: Option<&Path>) -> Result<()> {
    let config = load_config(common)?;
    let tpr = tpr(&config)?;
    let dir = out_dir(common)?;
    let data = read_data(data)?;
    let seg = load_propseg(propseg)?;
    let indices = evaluation_indices(&data);
    let proposals = render_all(&data, &indices, &seg.recipe)?;
    let maps = dir.join("maps");
    fs::create_dir_all(&maps).map_err(|e| io_at(&maps, e))?;
    let mut all = Vec::new();
    let mut raw = String::from("proposal_id,score,label\n");
    let mut rows = String::from("proposal_id,split,gt_class,positives,negatives,auroc,ap,fpr95\n");
    for (k, (ids, chunk)) in indices.chunks(32).zip(proposals.chunks(32)).enumerate() {
        let refs: Vec<&Proposal> = chunk.iter().collect();
        let segs = seg.segment_batch(&refs, common.seed.wrapping_add(k as u64))?;
        for ((&id, p), s) in ids.iter().zip(chunk).zip(&segs) {
            let umap = rbfood::umap::UncertaintyMap::new(28, 28, s.u_seg.clone())?;
            write_text(&maps.join(format!("{id}.umap")), &umap.to_text())?;
            write_text(&maps.join(format!("{id}.pgm")), &umap.to_pgm())?;
            let samples = pixel_ood_samples(std::slice::from_ref(s), &[p]);
            for x in &samples {
                let _ = writeln!(raw, "{id},{},{}", x.score, x.label as u8);
            }
            let pos = samples.iter().filter(|x| x.label).count();
            let rec = &data.proposals[id];
            let _ = writeln!(
                rows,
                "{id},{},{},{pos},{},{},{},{}",
                rec.split.name(),
                class_name(rec.gt_class),
                samples.len() - pos,
                fmt_metric(auroc(&samples)),
                fmt_metric(average_precision(&samples)),
                fmt_metric(fpr_at_tpr(&samples, tpr))
            );
            all.extend(samples);
        }
    }
    write_text(&dir.join("raw_scores.csv"), &raw)?;
    write_text(&dir.join("pixel_scores.csv"), &write_scores_csv(&all))?;
    write_text(&dir.join("proposals.csv"), &rows)?;
    let mut summary = String::from("metric,value\n");
    summary.push_str(&metric_lines(&all, tpr));
    if let Some(path) = propcls {
        let cls = load_propcls(path)?;
        let refs: Vec<&Proposal> = proposals.iter().collect();
        let results = cls.classify_proposals(&seg, &refs, common.seed)?;
        let mut table = String::from("proposal_id,split,gt_class,predicted,u_cls,whole_box\n");
        let mut scores = Vec::new();
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for (&id, r) in indices.iter().zip(&results) {
            let rec = &data.proposals[id];
            let _ = writeln!(
                table,
                "{id},{},{},{},{:.6},{}",
                rec.split.name(),
                class_name(rec.gt_class),
                CLASS_NAMES[r.predicted_class as usize],
                r.u_cls,
                r.whole_box as u8
            );
            scores.push(ScoredSample::new(r.u_cls, rec.split == Split::TestOod));
            if let (Split::TestKnown, Some(gt)) = (rec.split, rec.gt_class) {
                pred.push(r.predicted_class);
                truth.push(merge_label(gt, &cls.merge));
            }
        }
        write_text(&dir.join("classification.csv"), &table)?;
        write_text(&dir.join("cls_scores.csv"), &write_scores_csv(&scores))?;
        let _ = writeln!(summary, "cls_accuracy,{}", fmt_metric(accuracy(&pred, &truth)));
        for line in metric_lines(&scores, tpr).lines() {
            let _ = writeln!(summary, "cls_{line}");
        }
    }
    write_text(&dir.join("summary.csv"), &summary)
}

pub fn eval_image(common: &Common, data: &Path, propseg: &Path, propcls: &Path, scene: Option<usize>) -> Result<()> {
    let config = load_config(common)?;
    let tpr = tpr(&config)?;
    let pipeline = config.pipeline()?;
    let dir = out_dir(common)?;
    let data = read_data(data)?;
    let seg = load_propseg(propseg)?;
    let cls = load_propcls(propcls)?;
    let scenes = match scene {
        Some(s) if s < data.scenes.len() => vec![s],
        Some(s) => return Err(Error::Invalid(format!("no scene {s} in a dataset of {}", data.scenes.len()))),
        None => data.scenes_in(SceneSplit::Test),
    };
    let mut all = Vec::new();
    for s in scenes {
        let sc = &data.scenes[s];
        let ranked = scene_ranked_proposals(&data, s, &seg.recipe, common.seed)?;
        let result = whole_image_uncertainty(&ranked, &seg, &cls, &pipeline, (sc.width, sc.height), common.seed)?;
        write_text(&dir.join(format!("scene_{s}.umap")), &result.umap.to_text())?;
        write_text(&dir.join(format!("scene_{s}.pgm")), &result.umap.to_pgm())?;
        let mut contributing = String::from("proposal_id,u_cls\n");
        for (id, u) in &result.contributing {
            let _ = writeln!(contributing, "{id},{u:.6}");
        }
        write_text(&dir.join(format!("contributing_{s}.csv")), &contributing)?;
        all.extend(image_pixel_samples(&result.umap, sc));
    }
    write_text(&dir.join("pixel_scores.csv"), &write_scores_csv(&all))?;
    write_text(&dir.join("summary.csv"), &format!("metric,value\n{}", metric_lines(&all, tpr)))
}

pub fn metrics(common: &Common, scores: &Path) -> Result<()> {
    let config = load_config(common)?;
    let tpr = tpr(&config)?;
    let text = fs::read_to_string(scores).map_err(|e| io_at(scores, e))?;
    let samples = read_scores_csv(&text)?;
    let fpr_name = if tpr == 0.95 { "fpr95".to_string() } else { format!("fpr_at_{tpr}") };
    let report = format!(
        "auroc,{:.6}\nap,{:.6}\n{fpr_name},{:.6}\n",
        auroc(&samples)?,
        average_precision(&samples)?,
        fpr_at_tpr(&samples, tpr)?
    );
    print!("{report}");
    if let Some(out) = &common.out {
        write_text(out, &report)?;
    }
    Ok(())
}

pub fn flag_detections(common: &Common, data: &Path, propseg: &Path, propcls: &Path) -> Result<()> {
    let config = load_config(common)?;
    let theta: f64 = config.get("pipeline.theta_flag")?;
    let dir = out_dir(common)?;
    let data = read_data(data)?;
    let seg = load_propseg(propseg)?;
    let cls = load_propcls(propcls)?;
    let labelled = synthetic_detections(&data, common.seed);
    let detections: Vec<Detection> = labelled.iter().map(|(d, _)| *d).collect();
    let flagged = flag_uncertain_detections(&data, &detections, &seg, &cls, theta, common.seed)?;
    let mut table = String::from("scene,x,y,w,h,class,score,u_cls,flagged,mislabeled\n");
    let (mut wrong, mut wrong_flagged, mut right, mut right_flagged) = (0usize, 0usize, 0usize, 0usize);
    for (f, (_, mislabeled)) in flagged.iter().zip(&labelled) {
        let d = &f.detection;
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{:.6},{:.6},{},{}",
            d.scene,
            d.bbox.x,
            d.bbox.y,
            d.bbox.w,
            d.bbox.h,
            CLASS_NAMES[d.class as usize],
            d.score,
            f.result.u_cls,
            f.flagged as u8,
            *mislabeled as u8
        );
        if *mislabeled {
            wrong += 1;
            wrong_flagged += f.flagged as usize;
        } else {
            right += 1;
            right_flagged += f.flagged as usize;
        }
    }
    let rate = |a: usize, n: usize| if n == 0 { "nan".to_string() } else { format!("{:.6}", a as f64 / n as f64) };
    write_text(&dir.join("detections.csv"), &table)?;
    write_text(
        &dir.join("summary.csv"),
        &format!(
            "metric,value\nflag_rate_mislabeled,{}\nflag_rate_correct,{}\nmislabeled,{wrong}\ncorrect,{right}\n",
            rate(wrong_flagged, wrong),
            rate(right_flagged, right)
        ),
    )
}
