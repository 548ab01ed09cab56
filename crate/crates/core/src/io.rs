//! File formats: the raster container, the weights file, GeoJSON polygons
//! and line-oriented reports. Every write goes to a temporary file that is
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::metrics::Point;
use crate::nn::{ManifestEntry, ModelSpec, ModelWeights};
use crate::postprocess::{FieldPolygon, RasterMeta};
use crate::tensor::DenseTensor;

pub const RASTER_MAGIC: &[u8] = b"FBRASTER1\n";
pub const WEIGHTS_MAGIC: &[u8] = b"FBWEIGHTS1\n";

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn framed(magic: &[u8], header: &impl Serialize, payload_len: usize) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(magic.len() + 8 + header.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    Ok(out)
}

/// Splits a framed file into its parsed header and the payload bytes.
fn unframe<'a, H: for<'de> Deserialize<'de>>(bytes: &'a [u8], magic: &[u8], what: &str) -> Result<(H, &'a [u8])> {
    let rest = bytes
        .strip_prefix(magic)
        .ok_or_else(|| Error::Format(format!("not a {what} file")))?;
    if rest.len() < 8 {
        return Err(Error::Format(format!("truncated {what} header")));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("eight bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(Error::Format(format!("truncated {what} header")));
    }
    let header = serde_json::from_slice(&rest[..len]).map_err(|e| Error::Format(format!("{what} header: {e}")))?;
    Ok((header, &rest[len..]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterHeader {
    /// `[C, T, H, W]` or `[C, H, W]`.
    pub dims: Vec<usize>,
    pub dtype: Dtype,
    pub band_names: Vec<String>,
    pub geotransform: [f64; 6],
    pub crs: String,
    pub transformed: bool,
}

impl RasterHeader {
    pub fn validate(&self) -> Result<()> {
        if !(3..=4).contains(&self.dims.len()) {
            return Err(Error::Format(format!("raster dims {:?} must have rank 3 or 4", self.dims)));
        }
        if self.band_names.len() != self.dims[0] {
            return Err(Error::Format(format!(
                "{} band names for {} bands",
                self.band_names.len(),
                self.dims[0]
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn width(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn meta(&self) -> RasterMeta {
        RasterMeta {
            width: self.width(),
            height: self.height(),
            geotransform: self.geotransform,
            crs: self.crs.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub header: RasterHeader,
    pub data: DenseTensor,
}

impl Raster {
    /// A raster with unit geotransform and no CRS.
    pub fn new(data: DenseTensor, band_names: Vec<String>) -> Result<Self> {
        let header = RasterHeader {
            dims: data.shape().to_vec(),
            dtype: Dtype::F64,
            band_names,
            geotransform: [0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            crs: String::new(),
            transformed: false,
        };
        header.validate()?;
        Ok(Self { header, data })
    }

    pub fn with_meta(mut self, geotransform: [f64; 6], crs: &str) -> Self {
        self.header.geotransform = geotransform;
        self.header.crs = crs.to_string();
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.header.validate()?;
        if self.header.dims != self.data.shape() {
            return Err(Error::Format(format!(
                "header dims {:?} do not match data {:?}",
                self.header.dims,
                self.data.shape()
            )));
        }
        let mut out = framed(RASTER_MAGIC, &self.header, self.data.len() * self.header.dtype.size())?;
        match self.header.dtype {
            Dtype::F64 => self.data.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => self
                .data
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
        Ok(out)
    }

    /// Parses and validates the header before touching the payload.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (RasterHeader, _) = unframe(bytes, RASTER_MAGIC, "raster")?;
        header.validate()?;
        let n: usize = header.dims.iter().product();
        if payload.len() != n * header.dtype.size() {
            return Err(Error::Format(format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                n * header.dtype.size()
            )));
        }
        let data = match header.dtype {
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
                .collect(),
        };
        let data = DenseTensor::new(header.dims.clone(), data)?;
        Ok(Self { header, data })
    }
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    atomic_write(path, &r.to_bytes()?)
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    Raster::from_bytes(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    spec: ModelSpec,
    entries: Vec<ManifestEntry>,
}

pub fn weights_to_bytes(w: &ModelWeights) -> Result<Vec<u8>> {
    let header = WeightsHeader {
        spec: w.spec.clone(),
        entries: w.manifest().to_vec(),
    };
    let mut out = framed(WEIGHTS_MAGIC, &header, w.parameter_count() * 8)?;
    for t in w.tensors() {
        t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    Ok(out)
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    let (header, blob): (WeightsHeader, _) = unframe(bytes, WEIGHTS_MAGIC, "weights")?;
    let total: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(Error::Weight(format!(
            "parameter blob has {} bytes, manifest implies {}",
            blob.len(),
            total * 8
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    let mut tensors = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Weight(format!("entry {} points outside the blob", e.name)))?;
        tensors.push(DenseTensor::new(e.shape.clone(), slice.to_vec())?);
    }
    ModelWeights::from_parts(header.spec, header.entries, tensors)
}

pub fn write_weights(path: &Path, w: &ModelWeights) -> Result<()> {
    atomic_write(path, &weights_to_bytes(w)?)
}

pub fn read_weights(path: &Path) -> Result<ModelWeights> {
    weights_from_bytes(&fs::read(path)?)
}

fn ring_json(ring: &[Point]) -> Value {
    let mut coords: Vec<Value> = ring.iter().map(|p| json!([p[0], p[1]])).collect();
    if let Some(first) = ring.first() {
        coords.push(json!([first[0], first[1]]));
    }
    Value::Array(coords)
}

/// A FeatureCollection with one Polygon feature per field. A non-empty CRS
/// is carried in a top-level `crs` member.
pub fn polygons_to_geojson(polys: &[FieldPolygon], crs: &str) -> Value {
    let features: Vec<Value> = polys
        .iter()
        .map(|p| {
            let rings: Vec<Value> = p.rings().map(|r| ring_json(r)).collect();
            json!({
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": rings},
                "properties": {"area_m2": p.area_m2, "component_id": p.component_id},
            })
        })
        .collect();
    let mut fc = json!({"type": "FeatureCollection", "features": features});
    if !crs.is_empty() {
        fc["crs"] = Value::String(crs.to_string());
    }
    fc
}

fn parse_ring(v: &Value) -> Result<Vec<Point>> {
    let pts = v
        .as_array()
        .ok_or_else(|| Error::Format("ring is not an array".into()))?
        .iter()
        .map(|p| match p.as_array().map(|a| a.as_slice()) {
            Some([x, y, ..]) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) => Ok([x, y]),
                _ => Err(Error::Format("non-numeric coordinate".into())),
            },
            _ => Err(Error::Format("position needs two coordinates".into())),
        })
        .collect::<Result<Vec<Point>>>()?;
    let mut pts = pts;
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    if pts.len() < 3 {
        return Err(Error::Format("ring has fewer than three positions".into()));
    }
    Ok(pts)
}

/// Reads Polygon and MultiPolygon features. Returns the polygons and the
/// `crs` member (empty when absent).
pub fn polygons_from_geojson(v: &Value) -> Result<(Vec<FieldPolygon>, String)> {
    if v["type"] != "FeatureCollection" {
        return Err(Error::Format("expected a GeoJSON FeatureCollection".into()));
    }
    let features = v["features"]
        .as_array()
        .ok_or_else(|| Error::Format("FeatureCollection without features".into()))?;
    let mut out = Vec::new();
    for (i, f) in features.iter().enumerate() {
        let g = &f["geometry"];
        let id = f["properties"]["component_id"].as_u64().map_or(i + 1, |v| v as usize);
        let polys: Vec<&Value> = match g["type"].as_str() {
            Some("Polygon") => vec![&g["coordinates"]],
            Some("MultiPolygon") => g["coordinates"]
                .as_array()
                .ok_or_else(|| Error::Format("bad MultiPolygon".into()))?
                .iter()
                .collect(),
            other => return Err(Error::Format(format!("unsupported geometry {other:?}"))),
        };
        for p in polys {
            let rings = p
                .as_array()
                .ok_or_else(|| Error::Format("polygon is not an array of rings".into()))?;
            let mut rings = rings.iter().map(parse_ring).collect::<Result<Vec<_>>>()?;
            if rings.is_empty() {
                return Err(Error::Format("polygon without rings".into()));
            }
            let exterior = rings.remove(0);
            out.push(FieldPolygon::new(exterior, rings, id));
        }
    }
    let crs = v["crs"].as_str().unwrap_or_default().to_string();
    Ok((out, crs))
}

pub fn write_geojson(path: &Path, polys: &[FieldPolygon], crs: &str) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&polygons_to_geojson(polys, crs)).map_err(|e| Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_geojson(path: &Path) -> Result<(Vec<FieldPolygon>, String)> {
    let v: Value = serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Format(format!("GeoJSON: {e}")))?;
    polygons_from_geojson(&v)
}

/// One JSON object per line, fields in declaration order.
pub fn jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    atomic_write(path, &jsonl(records)?)
}

/// Raster-level metric record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iou: f64,
    pub mcc: f64,
    pub kappa: f64,
    pub fdr: f64,
    #[serde(rename = "for")]
    pub for_rate: f64,
    pub msd: Option<f64>,
    pub hausdorff: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, StageConfig};
    use crate::tensor::PatchSpec;

    #[test]
    fn raster_round_trip_is_bit_exact() {
        let t = DenseTensor::from_fn(&[2, 3, 4, 5], |i| (i[0] * 60 + i[1] * 20 + i[2] * 5 + i[3]) as f64 / 7.0 - 1e-300);
        let r = Raster::new(t, vec!["a".into(), "b".into()])
            .unwrap()
            .with_meta([10.0, 10.0, 0.0, 50.0, 0.0, -10.0], "EPSG:32755");
        let bytes = r.to_bytes().unwrap();
        let back = Raster::from_bytes(&bytes).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn f32_payload_round_trips_at_single_precision() {
        let t = DenseTensor::from_fn(&[1, 2, 2], |i| 0.1 * (i[1] + i[2]) as f64);
        let mut r = Raster::new(t.clone(), vec!["x".into()]).unwrap();
        r.header.dtype = Dtype::F32;
        let back = Raster::from_bytes(&r.to_bytes().unwrap()).unwrap();
        assert!(back.data.max_abs_diff(&t) < 1e-7);
    }

    #[test]
    fn malformed_rasters_are_format_errors() {
        let r = Raster::new(DenseTensor::zeros(&[1, 2, 2]), vec!["x".into()]).unwrap();
        let mut bytes = r.to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(Raster::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(Raster::from_bytes(b"nonsense"), Err(Error::Format(_))));
        assert!(matches!(
            Raster::new(DenseTensor::zeros(&[2, 2, 2]), vec!["x".into()]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn weights_round_trip_is_bit_exact() {
        let cfg = StageConfig {
            repeats: 1,
            channels: 4,
            patch: PatchSpec::new(2, 2, 2),
            causal: false,
        };
        let w = init_weights(cfg, 11).unwrap();
        let bytes = weights_to_bytes(&w).unwrap();
        let back = weights_from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(weights_to_bytes(&back).unwrap(), bytes);
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(weights_from_bytes(cut), Err(Error::Weight(_))));
    }

    #[test]
    fn geojson_round_trip() {
        let sq = FieldPolygon::new(vec![[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]], vec![], 3);
        let v = polygons_to_geojson(std::slice::from_ref(&sq), "EPSG:3857");
        assert_eq!(v["features"][0]["geometry"]["coordinates"][0].as_array().unwrap().len(), 5);
        let (back, crs) = polygons_from_geojson(&v).unwrap();
        assert_eq!(crs, "EPSG:3857");
        assert_eq!(back, vec![sq]);
    }

    #[test]
    fn metrics_record_field_order() {
        let r = MetricsRecord {
            iou: 0.5,
            mcc: 0.25,
            kappa: 0.2,
            fdr: 0.1,
            for_rate: 0.0,
            msd: None,
            hausdorff: Some(1.0),
        };
        let line = String::from_utf8(jsonl(&[r]).unwrap()).unwrap();
        assert_eq!(
            line,
            "{\"iou\":0.5,\"mcc\":0.25,\"kappa\":0.2,\"fdr\":0.1,\"for\":0.0,\"msd\":null,\"hausdorff\":1.0}\n"
        );
    }
}
