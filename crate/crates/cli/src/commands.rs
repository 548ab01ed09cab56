use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use fieldbound::io::{self, MetricsRecord, Raster};
use fieldbound::metrics::{cohens_kappa, confusion, fdr, for_rate, hausdorff, iou_binary, mcc, msd};
use fieldbound::nn::{self, ModelSpec};
use fieldbound::postprocess::{self as pp, Mask, RasterMeta, ThresholdPair};
use fieldbound::s1proc::{self, DualPolSample, S1Stack, S1_BAND_NAMES};
use fieldbound::synth::{self, SceneSpec};
use fieldbound::{DenseTensor, Error, MultitaskPrediction};
use serde::Serialize;

use crate::{
    Command, DecomposeArgs, FitArgs, InitArgs, MatchArgs, MetricsArgs, PolygonizeArgs, PredictArgs, SynthArgs,
    TransformArgs, TuneArgs,
};

/// Synthetic scenes use 10 m pixels with the origin at the top-left corner.
const SYNTH_CRS: &str = "EPSG:32633";
const SYNTH_PIXEL_M: f64 = 10.0;
const OPTICAL_BAND_NAMES: [&str; 4] = ["blue", "green", "red", "nir"];
const MAP_BAND_NAMES: [&str; 3] = ["extent", "boundary", "distance"];
const DUALPOL_BAND_NAMES: [&str; 3] = ["alpha_bar", "entropy", "anisotropy"];

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData(a) => synth_data(a),
        Command::TransformS1(a) => transform_s1(a),
        Command::DecomposeDualpol(a) => decompose_dualpol(a),
        Command::InitWeights(a) => init_weights(a),
        Command::Predict(a) => predict(a),
        Command::Metrics(a) => metrics(a),
        Command::Polygonize(a) => polygonize(a),
        Command::MatchPolygons(a) => match_polygons(a),
        Command::TuneThresholds(a) => tune_thresholds(a),
        Command::FitToy(a) => fit_toy(a),
    }
}

fn names(n: &[&str]) -> Vec<String> {
    n.iter().map(|s| s.to_string()).collect()
}

fn read_raster(path: &Path) -> Result<Raster> {
    io::read_raster(path).with_context(|| format!("reading {}", path.display()))
}

fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    io::write_raster(path, r).with_context(|| format!("writing {}", path.display()))
}

/// The band called `name` of a `C x H x W` raster, or its only band.
fn band(r: &Raster, name: &str) -> Result<DenseTensor, Error> {
    let d = &r.header.dims;
    if d.len() != 3 {
        return Err(Error::Dimension(format!("expected a C x H x W raster, got dims {d:?}")));
    }
    let i = match r.header.band_names.iter().position(|b| b == name) {
        Some(i) => i,
        None if d[0] == 1 => 0,
        None => {
            return Err(Error::Format(format!(
                "no band named {name:?} among {:?}",
                r.header.band_names
            )))
        }
    };
    let plane = d[1] * d[2];
    DenseTensor::new(vec![d[1], d[2]], r.data.data()[i * plane..(i + 1) * plane].to_vec())
}

fn stack_maps(p: &MultitaskPrediction) -> Result<Raster, Error> {
    Raster::new(p.to_stack(), names(&MAP_BAND_NAMES))
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let spec = SceneSpec {
        seed: a.seed,
        height: a.size,
        width: a.size,
        n_fields: a.fields,
        times: a.times,
        cloud_fraction: a.cloud_fraction,
        ..SceneSpec::default()
    };
    let scene = synth::gen_scene(&spec)?;
    fs::create_dir_all(&a.out_dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let gt = [0.0, SYNTH_PIXEL_M, 0.0, SYNTH_PIXEL_M * a.size as f64, 0.0, -SYNTH_PIXEL_M];
    let geo = |r: Raster| r.with_meta(gt, SYNTH_CRS);
    let dir = &a.out_dir;

    write_raster(&dir.join("s2_like.fbr"), &geo(Raster::new(scene.optical, names(&OPTICAL_BAND_NAMES))?))?;
    write_raster(&dir.join("s1_like.fbr"), &geo(Raster::new(scene.sar, names(&S1_BAND_NAMES))?))?;
    write_raster(&dir.join("gt.fbr"), &geo(stack_maps(&scene.gt)?))?;
    let clouds: Vec<f64> = scene
        .clouds
        .iter()
        .flat_map(|m| m.data().iter().map(|&c| f64::from(u8::from(c))))
        .collect();
    let clouds = DenseTensor::new(vec![1, a.times, a.size, a.size], clouds)?;
    write_raster(&dir.join("clouds.fbr"), &geo(Raster::new(clouds, names(&["cloud"]))?))?;

    let meta = RasterMeta::new(a.size, a.size, gt, SYNTH_CRS)?;
    let fields = pp::components_to_polygons(&Mask::from_threshold(&scene.gt.extent, 0.5)?, &meta)?;
    io::write_geojson(&dir.join("gt.geojson"), &fields, SYNTH_CRS)?;
    Ok(())
}

fn transform_s1(a: TransformArgs) -> Result<()> {
    let r = read_raster(&a.input)?;
    if r.header.band_names != S1_BAND_NAMES {
        return Err(Error::Format(format!(
            "radar bands must be {S1_BAND_NAMES:?}, found {:?}",
            r.header.band_names
        ))
        .into());
    }
    let stack = S1Stack::new(r.data, r.header.transformed)?;
    let out = s1proc::transform_s1(&stack)?;
    let raster = Raster {
        header: io::RasterHeader {
            transformed: true,
            ..r.header
        },
        data: out.bands,
    };
    write_raster(&a.out, &raster)
}

fn decompose_dualpol(a: DecomposeArgs) -> Result<()> {
    let r = read_raster(&a.in_j)?;
    let dims = &r.header.dims;
    if dims[0] != 8 {
        return Err(Error::Format(format!("coherency raster needs 8 bands, has {}", dims[0])).into());
    }
    let plane: usize = dims[1..].iter().product();
    let src = r.data.data();
    let mut out = vec![0.0; 3 * plane];
    let mut ch = [0.0; 8];
    for p in 0..plane {
        for (k, c) in ch.iter_mut().enumerate() {
            *c = src[k * plane + p];
        }
        let d = s1proc::dualpol_decompose(&DualPolSample::from_channels(&ch)?)
            .with_context(|| format!("pixel {p}"))?;
        out[p] = d.alpha_bar;
        out[plane + p] = d.entropy;
        out[2 * plane + p] = d.anisotropy;
    }
    let mut shape = dims.clone();
    shape[0] = 3;
    let raster = Raster::new(DenseTensor::new(shape, out)?, names(&DUALPOL_BAND_NAMES))?
        .with_meta(r.header.geotransform, &r.header.crs);
    write_raster(&a.out, &raster)
}

fn read_spec(path: &Path) -> Result<ModelSpec> {
    let text = fs::read(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    let spec: ModelSpec = serde_json::from_slice(&text)
        .map_err(|e| Error::Config(format!("model configuration {}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

fn init_weights(a: InitArgs) -> Result<()> {
    let spec = read_spec(&a.model_cfg)?;
    let w = nn::init_weights_with(spec, a.seed, a.identity_residuals)?;
    io::write_weights(&a.out_weights, &w).with_context(|| format!("writing {}", a.out_weights.display()))
}

fn predict(a: PredictArgs) -> Result<()> {
    let w = io::read_weights(&a.weights).with_context(|| format!("reading {}", a.weights.display()))?;
    let spec = match &a.model_cfg {
        Some(p) => read_spec(p)?,
        None => w.spec.clone(),
    };
    let inputs = a.inputs.iter().map(|p| read_raster(p)).collect::<Result<Vec<_>>>()?;
    let pred = match (&spec, inputs.as_slice()) {
        (ModelSpec::Unet3d(cfg), [x]) => nn::unet3d_forward(&x.data, cfg, &w)?,
        (ModelSpec::Fusion(cfg), [s2, s1]) => nn::fusion_forward(&s2.data, &s1.data, cfg, &w)?,
        (ModelSpec::Stage(_), _) => {
            return Err(Error::Config("a single stage has no prediction head".into()).into());
        }
        (_, xs) => {
            return Err(Error::Config(format!("this model takes a different number of inputs than {}", xs.len())).into());
        }
    };
    let h = &inputs[0].header;
    write_raster(&a.out, &stack_maps(&pred)?.with_meta(h.geotransform, &h.crs))
}

/// Every vertex of the pixel-edge outlines of `mask`.
fn outline_vertices(mask: &Mask, meta: &RasterMeta) -> Result<Vec<[f64; 2]>> {
    Ok(pp::components_to_polygons(mask, meta)?
        .iter()
        .flat_map(|p| p.vertices())
        .collect())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let (pr, tr) = (read_raster(&a.pred)?, read_raster(&a.truth)?);
    let (p, t) = (band(&pr, "extent")?, band(&tr, "extent")?);
    if p.shape() != t.shape() {
        return Err(Error::Dimension(format!("prediction {:?} and truth {:?} differ", p.shape(), t.shape())).into());
    }
    let (pm, tm) = (Mask::from_threshold(&p, 0.5)?, Mask::from_threshold(&t, 0.5)?);
    let labels = |m: &Mask| m.data().iter().map(|&b| usize::from(b)).collect::<Vec<_>>();
    let cm = confusion(&labels(&pm), &labels(&tm), 2)?;
    let meta = pr.header.meta();
    let (pv, tv) = (outline_vertices(&pm, &meta)?, outline_vertices(&tm, &meta)?);
    let both = !pv.is_empty() && !tv.is_empty();
    let record = MetricsRecord {
        iou: iou_binary(pm.data(), tm.data())?,
        mcc: mcc(&cm).value,
        kappa: cohens_kappa(&cm).value,
        fdr: fdr(pm.data(), tm.data())?.value,
        for_rate: for_rate(pm.data(), tm.data())?.value,
        msd: if both { Some(msd(&pv, &tv)?) } else { None },
        hausdorff: if both { Some(hausdorff(&pv, &tv)?) } else { None },
    };
    io::write_jsonl(&a.report, &[record])?;
    Ok(())
}

fn extent_and_bounds(extent: &Path, bounds: Option<&Path>) -> Result<(DenseTensor, DenseTensor, RasterMeta)> {
    let er = read_raster(extent)?;
    let e = band(&er, "extent")?;
    let b = match bounds {
        Some(p) => band(&read_raster(p)?, "boundary")?,
        None => band(&er, "boundary")?,
    };
    let meta = er.header.meta();
    meta.validate()?;
    Ok((e, b, meta))
}

fn polygonize(a: PolygonizeArgs) -> Result<()> {
    let (e, b, meta) = extent_and_bounds(&a.extent, a.bounds.as_deref())?;
    let t = ThresholdPair::new(a.tb, a.te)?;
    let mask = pp::refined_threshold(&e, &b, t)?;
    let polys = pp::components_to_polygons(&mask, &meta)?;
    let polys = pp::simplify_filter(&polys, a.tolerance, a.min_area)?;
    io::write_geojson(&a.out_geojson, &polys, &meta.crs)?;
    Ok(())
}

fn match_polygons(a: MatchArgs) -> Result<()> {
    let (pred, _) = io::read_geojson(&a.pred).with_context(|| format!("reading {}", a.pred.display()))?;
    let (truth, _) = io::read_geojson(&a.truth).with_context(|| format!("reading {}", a.truth.display()))?;
    if !(0.0..=1.0).contains(&a.iou_min) {
        return Err(Error::Config(format!("iou-min {} outside [0, 1]", a.iou_min)).into());
    }
    let matches = pp::match_polygons(&pred, &truth, a.iou_min)?;
    io::write_jsonl(&a.report, &matches)?;
    Ok(())
}

#[derive(Serialize)]
struct FrontRecord {
    t_b: f64,
    t_e: f64,
    one_minus_iou: f64,
    fdr: f64,
    #[serde(rename = "for")]
    for_rate: f64,
    count_error: f64,
    components: usize,
    norm: f64,
    best: bool,
}

fn tune_thresholds(a: TuneArgs) -> Result<()> {
    let (e, b, _) = extent_and_bounds(&a.extent, a.bounds.as_deref())?;
    let truth = Mask::from_threshold(&band(&read_raster(&a.truth)?, "extent")?, 0.5)?;
    let n = (1.0 / a.grid_step).round();
    if !(a.grid_step > 0.0) || (n * a.grid_step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {} does not divide 1", a.grid_step)).into());
    }
    let grid = pp::threshold_grid(n as usize)?;
    let (_, count) = pp::label_components(&truth);
    let result = pp::tune_thresholds(&e, &b, &truth, count, &grid)?;
    let rows: Vec<FrontRecord> = result
        .pareto
        .iter()
        .map(|c| FrontRecord {
            t_b: c.thresholds.t_b,
            t_e: c.thresholds.t_e,
            one_minus_iou: c.objectives[0],
            fdr: c.objectives[1],
            for_rate: c.objectives[2],
            count_error: c.objectives[3],
            components: c.components,
            norm: c.norm(),
            best: c.thresholds == result.best,
        })
        .collect();
    io::write_jsonl(&a.report, &rows)?;
    Ok(())
}

#[derive(Serialize)]
struct TraceRecord {
    step: usize,
    loss: f64,
}

fn fit_toy(a: FitArgs) -> Result<()> {
    let cfg = nn::toy_config();
    let data = nn::toy_dataset(a.seed, a.samples, 4, 0.0)?;
    let init = nn::init_weights(cfg.clone(), a.seed)?;
    let (w, trace) = nn::fit_toy(&cfg, init, &data, a.steps, a.lr)?;
    io::write_weights(&a.out_weights, &w).with_context(|| format!("writing {}", a.out_weights.display()))?;
    if let Some(path) = &a.trace {
        let rows: Vec<TraceRecord> = trace.iter().enumerate().map(|(step, &loss)| TraceRecord { step, loss }).collect();
        io::write_jsonl(path, &rows)?;
    }
    Ok(())
}
