//! On-disk scene container.
//!
//! A text header of `key: value` lines opened by the magic `GARE1` and closed
//! by `end_header`, followed by little-endian `f32` arrays:
//!
//! 1. per-Gaussian blocks: positions, scales, quaternions, opacities, colors,
//!    `f_ref`, `f_sun`, `f_sky`, `f_ind`, `f_vis`, sky semantics, `f_amb`;
//! 2. decoder weights in header order (per layer: weights then biases);
//! 3. the embedding table (per image: amb, sun, sky, ind, sunny flag);
//! 4. baked sample directions.
//!
//! Cameras live in the header as decimal text so their rotations stay
//! orthonormal to f64 precision.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{
    Camera, DecoderKind, Decoders, EmbeddingSet, Gaussian, Scene, Stage, EMBEDDING_DIM, FEATURE_DIM,
    VIS_FEATURE_DIM,
};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Linear, Mlp};

pub const MAGIC: &str = "GARE1";

/// Loaded quaternions are normalized only to f32 precision.
const LOADED_QUAT_TOL: f64 = 1e-6;

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_scene(scene, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let file = std::fs::File::open(path)?;
    read_scene(BufReader::new(file))
}

pub fn write_scene<W: Write>(scene: &Scene, w: &mut W) -> Result<()> {
    let n = scene.gaussians.len();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "gaussians: {n}")?;
    for key in ["f_ref_dim", "f_sun_dim", "f_sky_dim", "f_ind_dim", "f_amb_dim"] {
        writeln!(w, "{key}: {FEATURE_DIM}")?;
    }
    writeln!(w, "f_vis_dim: {VIS_FEATURE_DIM}")?;
    writeln!(w, "embedding_dim: {EMBEDDING_DIM}")?;
    writeln!(w, "images: {}", scene.embeddings.len())?;
    writeln!(w, "stage: {}", scene.stage as u32)?;
    writeln!(w, "bake_directions: {}", scene.bake_directions.len())?;
    for kind in DecoderKind::ALL {
        let mlp = scene.decoders.get(kind);
        let widths: Vec<String> = mlp.widths().iter().map(|v| v.to_string()).collect();
        writeln!(w, "network {}: {} {}", kind.name(), widths.join(" "), mlp.output.name())?;
    }
    for cam in &scene.cameras {
        let mut vals = vec![cam.fx, cam.fy, cam.cx, cam.cy];
        vals.extend(cam.rotation.transpose().iter().copied()); // row-major
        vals.extend(cam.translation.iter().copied());
        let text: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "camera: {} {} {}", cam.width, cam.height, text.join(" "))?;
    }
    writeln!(w, "end_header")?;

    let mut buf: Vec<u8> = Vec::with_capacity(n * 120 * 4);
    let mut put = |vals: &mut dyn Iterator<Item = f64>| {
        for v in vals {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    let g = &scene.gaussians;
    put(&mut g.iter().flat_map(|g| g.position));
    put(&mut g.iter().flat_map(|g| g.scale));
    put(&mut g.iter().flat_map(|g| g.rotation));
    put(&mut g.iter().map(|g| g.opacity));
    put(&mut g.iter().flat_map(|g| g.color));
    put(&mut g.iter().flat_map(|g| g.f_ref));
    put(&mut g.iter().flat_map(|g| g.f_sun));
    put(&mut g.iter().flat_map(|g| g.f_sky));
    put(&mut g.iter().flat_map(|g| g.f_ind));
    put(&mut g.iter().flat_map(|g| g.f_vis));
    put(&mut g.iter().map(|g| g.sky_semantic));
    put(&mut g.iter().flat_map(|g| g.f_amb));
    for kind in DecoderKind::ALL {
        for layer in &scene.decoders.get(kind).layers {
            put(&mut layer.weight.iter().copied());
            put(&mut layer.bias.iter().copied());
        }
    }
    for e in &scene.embeddings {
        put(&mut e.amb.iter().chain(&e.sun).chain(&e.sky).chain(&e.ind).copied());
        put(&mut std::iter::once(if e.sunny { 1.0 } else { 0.0 }));
    }
    put(&mut scene.bake_directions.iter().flatten().copied());
    w.write_all(&buf)?;
    Ok(())
}

struct Header {
    gaussians: usize,
    images: usize,
    stage: Stage,
    bake_directions: usize,
    networks: Vec<(DecoderKind, Vec<usize>, Activation)>,
    cameras: Vec<Camera>,
}

fn parse_count(record: &str, value: &str) -> Result<usize> {
    value
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::parse(record, format!("expected a count, got {value:?}")))
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut line = String::new();
    let next_line = |r: &mut R, line: &mut String| -> Result<bool> {
        line.clear();
        Ok(r.read_line(line)? > 0)
    };
    if !next_line(r, &mut line)? || line.trim_end() != MAGIC {
        return Err(Error::parse("header", format!("missing magic {MAGIC:?}")));
    }
    let mut gaussians = None;
    let mut images = None;
    let mut stage = Stage::Untrained;
    let mut bake_directions = 0;
    let mut networks = Vec::new();
    let mut cameras = Vec::new();
    loop {
        if !next_line(r, &mut line)? {
            return Err(Error::parse("header", "missing end_header"));
        }
        let text = line.trim_end();
        if text == "end_header" {
            break;
        }
        let (key, value) = text
            .split_once(':')
            .ok_or_else(|| Error::parse("header", format!("malformed line {text:?}")))?;
        let key = key.trim();
        match key {
            "gaussians" => gaussians = Some(parse_count(key, value)?),
            "images" => images = Some(parse_count(key, value)?),
            "bake_directions" => bake_directions = parse_count(key, value)?,
            "stage" => {
                let s = parse_count(key, value)?;
                stage = Stage::from_index(s as u32)
                    .ok_or_else(|| Error::parse(key, format!("unknown stage {s}")))?;
            }
            "f_ref_dim" | "f_sun_dim" | "f_sky_dim" | "f_ind_dim" | "f_amb_dim" => {
                let d = parse_count(key, value)?;
                if d != FEATURE_DIM {
                    return Err(Error::dim(key, FEATURE_DIM, d));
                }
            }
            "f_vis_dim" => {
                let d = parse_count(key, value)?;
                if d != VIS_FEATURE_DIM {
                    return Err(Error::dim(key, VIS_FEATURE_DIM, d));
                }
            }
            "embedding_dim" => {
                let d = parse_count(key, value)?;
                if d != EMBEDDING_DIM {
                    return Err(Error::dim(key, EMBEDDING_DIM, d));
                }
            }
            "camera" => cameras.push(parse_camera(cameras.len(), value)?),
            k if k.starts_with("network ") => {
                let name = k["network ".len()..].trim();
                let kind = DecoderKind::from_name(name)
                    .ok_or_else(|| Error::parse(k, format!("unknown decoder {name:?}")))?;
                let mut parts: Vec<&str> = value.split_whitespace().collect();
                let act = parts
                    .pop()
                    .and_then(Activation::from_name)
                    .ok_or_else(|| Error::parse(k, "missing output activation"))?;
                let widths = parts
                    .iter()
                    .map(|p| parse_count(k, p))
                    .collect::<Result<Vec<_>>>()?;
                let (i, h, o, a) = kind.shape();
                let expected = [i, h[0], h[1], h[2], o];
                if widths.len() != expected.len() {
                    return Err(Error::dim(format!("{k} layer widths"), expected.len(), widths.len()));
                }
                for (e, g) in expected.iter().zip(&widths) {
                    if e != g {
                        return Err(Error::dim(k, *e, *g));
                    }
                }
                if act != a {
                    return Err(Error::parse(k, format!("unexpected activation {}", act.name())));
                }
                networks.push((kind, widths, act));
            }
            other => return Err(Error::parse("header", format!("unknown key {other:?}"))),
        }
    }
    let order: Vec<DecoderKind> = networks.iter().map(|n| n.0).collect();
    if order != DecoderKind::ALL {
        return Err(Error::parse("header", "networks must be listed as amb, ref, sun, sky, ind, vis"));
    }
    Ok(Header {
        gaussians: gaussians.ok_or_else(|| Error::parse("header", "missing gaussians count"))?,
        images: images.ok_or_else(|| Error::parse("header", "missing images count"))?,
        stage,
        bake_directions,
        networks,
        cameras,
    })
}

fn parse_camera(index: usize, value: &str) -> Result<Camera> {
    let record = format!("camera[{index}]");
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 2 + 4 + 9 + 3 {
        return Err(Error::dim(record, 18, parts.len()));
    }
    let width = parse_count(&record, parts[0])?;
    let height = parse_count(&record, parts[1])?;
    let nums = parts[2..]
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::parse(record.as_str(), format!("bad number {p:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let rotation = Matrix3::from_row_slice(&nums[4..13]);
    let translation = Vector3::new(nums[13], nums[14], nums[15]);
    Camera::new(nums[0], nums[1], nums[2], nums[3], rotation, translation, width, height)
        .map_err(|e| Error::parse(record, e.to_string()))
}

struct Payload {
    data: Vec<f32>,
    pos: usize,
}

impl Payload {
    fn take(&mut self, record: &str, count: usize) -> Result<&[f32]> {
        if self.pos + count > self.data.len() {
            return Err(Error::parse(record, "payload truncated"));
        }
        let s = &self.data[self.pos..self.pos + count];
        if let Some(i) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::parse(format!("{record}[{i}]"), "non-finite value"));
        }
        self.pos += count;
        Ok(s)
    }
}

pub fn read_scene<R: Read>(reader: R) -> Result<Scene> {
    let mut r = BufReader::new(reader);
    let header = read_header(&mut r)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::parse("payload", "length is not a multiple of 4"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut p = Payload { data, pos: 0 };
    let n = header.gaussians;
    let mut gaussians: Vec<Gaussian> = (0..n)
        .map(|_| Gaussian::new([0.0; 3], [1.0; 3], [1.0, 0.0, 0.0, 0.0], 1.0, [0.0; 3]))
        .collect();

    macro_rules! fill {
        ($name:literal, $dim:expr, |$g:ident, $s:ident| $body:expr) => {{
            let vals = p.take($name, n * $dim)?;
            for (chunk, $g) in vals.chunks_exact($dim).zip(gaussians.iter_mut()) {
                let $s: Vec<f64> = chunk.iter().map(|&v| v as f64).collect();
                $body;
            }
        }};
    }
    fill!("positions", 3, |g, s| g.position.copy_from_slice(&s));
    fill!("scales", 3, |g, s| g.scale.copy_from_slice(&s));
    fill!("quaternions", 4, |g, s| g.rotation.copy_from_slice(&s));
    fill!("opacities", 1, |g, s| g.opacity = s[0]);
    fill!("colors", 3, |g, s| g.color.copy_from_slice(&s));
    fill!("f_ref", FEATURE_DIM, |g, s| g.f_ref.copy_from_slice(&s));
    fill!("f_sun", FEATURE_DIM, |g, s| g.f_sun.copy_from_slice(&s));
    fill!("f_sky", FEATURE_DIM, |g, s| g.f_sky.copy_from_slice(&s));
    fill!("f_ind", FEATURE_DIM, |g, s| g.f_ind.copy_from_slice(&s));
    fill!("f_vis", VIS_FEATURE_DIM, |g, s| g.f_vis.copy_from_slice(&s));
    fill!("sky_semantic", 1, |g, s| g.sky_semantic = s[0]);
    fill!("f_amb", FEATURE_DIM, |g, s| g.f_amb.copy_from_slice(&s));

    let mut decoders = Decoders::zeros();
    for (kind, widths, act) in &header.networks {
        let mut layers = Vec::new();
        for (li, w) in widths.windows(2).enumerate() {
            let record = format!("network {} layer {li}", kind.name());
            let weight = p.take(&record, w[0] * w[1])?.iter().map(|&v| v as f64).collect();
            let bias = p.take(&record, w[1])?.iter().map(|&v| v as f64).collect();
            layers.push(Linear {
                inputs: w[0],
                outputs: w[1],
                weight,
                bias,
            });
        }
        *decoders.get_mut(*kind) = Mlp { layers, output: *act };
    }

    let mut embeddings = Vec::with_capacity(header.images);
    for i in 0..header.images {
        let record = format!("embedding[{i}]");
        let vals = p.take(&record, 4 * EMBEDDING_DIM + 1)?;
        let mut e = EmbeddingSet::zeros(false);
        let to_arr = |s: &[f32]| {
            let mut a = [0.0; EMBEDDING_DIM];
            a.iter_mut().zip(s).for_each(|(d, &v)| *d = v as f64);
            a
        };
        e.amb = to_arr(&vals[0..EMBEDDING_DIM]);
        e.sun = to_arr(&vals[EMBEDDING_DIM..2 * EMBEDDING_DIM]);
        e.sky = to_arr(&vals[2 * EMBEDDING_DIM..3 * EMBEDDING_DIM]);
        e.ind = to_arr(&vals[3 * EMBEDDING_DIM..4 * EMBEDDING_DIM]);
        e.sunny = match vals[4 * EMBEDDING_DIM] {
            v if v == 1.0 => true,
            v if v == 0.0 => false,
            v => return Err(Error::parse(format!("{record}.sunny"), format!("flag {v} is not 0 or 1"))),
        };
        embeddings.push(e);
    }
    let dirs = p.take("bake_directions", header.bake_directions * 3)?;
    let bake_directions = dirs
        .chunks_exact(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect();
    if p.pos != p.data.len() {
        return Err(Error::parse(
            "payload",
            format!("{} trailing values", p.data.len() - p.pos),
        ));
    }

    let scene = Scene {
        gaussians,
        decoders,
        embeddings,
        cameras: header.cameras,
        stage: header.stage,
        bake_directions,
    };
    scene.validate(LOADED_QUAT_TOL)?;
    Ok(scene)
}
