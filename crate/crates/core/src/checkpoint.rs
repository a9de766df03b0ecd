//! Self-describing checkpoint container: a text config block followed by
//! named parameter tensors (name, dims, 32-bit little-endian reals).

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{MooseError, Result};
use crate::model::{build_base_only, build_model, ProbeConfig, PyramidConfig, PyramidModel};

const CKPT_MAGIC: &str = "moose-ckpt-v1";

fn config_block(model: &PyramidModel) -> String {
    let p = &model.pcfg;
    let h = &model.hcfg;
    let dil: Vec<String> = p.branch_dilations.iter().map(|d| d.to_string()).collect();
    format!(
        "num_classes={}\nencoder_channels={}\nbranch_dilations={}\nbranch_channels={}\n\
         include_global_pool_branch={}\noutput_stride={}\nprobe_depth={}\n\
         projection_channels={}\nwith_probes={}\nseed={}\n",
        p.num_classes,
        p.encoder_channels,
        dil.join(","),
        p.branch_channels,
        p.include_global_pool_branch,
        p.output_stride,
        h.depth,
        h.projection_channels,
        model.has_probes(),
        model.seed,
    )
}

fn parse_config_block(text: &str) -> Result<(PyramidConfig, ProbeConfig, bool, u64)> {
    let mut kv = HashMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| MooseError::format(format!("checkpoint config missing '{k}'")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| MooseError::format(format!("bad value for '{k}'")))
    };
    let dilations: Vec<usize> = get("branch_dilations")?
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| MooseError::format("bad branch_dilations"))?;
    let pcfg = PyramidConfig {
        num_classes: parse_usize("num_classes")?,
        encoder_channels: parse_usize("encoder_channels")?,
        branch_dilations: dilations,
        branch_channels: parse_usize("branch_channels")?,
        include_global_pool_branch: get("include_global_pool_branch")? == "true",
        output_stride: parse_usize("output_stride")?,
    };
    let hcfg = ProbeConfig {
        depth: parse_usize("probe_depth")?,
        projection_channels: parse_usize("projection_channels")?,
    };
    let with_probes = get("with_probes")? == "true";
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| MooseError::format("bad seed"))?;
    Ok((pcfg, hcfg, with_probes, seed))
}

pub fn write_tensor(
    w: &mut impl Write,
    name: &str,
    shape: &[usize],
    data: impl Iterator<Item = f32>,
) -> Result<()> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    writeln!(w, "tensor {name} {} {}", shape.len(), dims.join(" "))?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_line(r: &mut impl BufRead) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    if n == 0 {
        return Err(MooseError::format("unexpected end of checkpoint"));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Read entries until `end`; the caller interprets the names.
pub fn read_tensors(r: &mut impl BufRead) -> Result<Vec<TensorEntry>> {
    let mut out = Vec::new();
    loop {
        let line = read_line(r)?;
        if line == "end" {
            return Ok(out);
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(MooseError::format(format!("expected tensor entry, got '{line}'")));
        }
        let name = parts
            .next()
            .ok_or_else(|| MooseError::format("tensor entry missing name"))?
            .to_string();
        let ndim: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| MooseError::format("tensor entry missing ndim"))?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(
                parts
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| MooseError::format("tensor entry missing dim"))?,
            );
        }
        let len: usize = shape.iter().product();
        let mut buf = vec![0u8; len * 4];
        r.read_exact(&mut buf)?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(TensorEntry { name, shape, data });
    }
}

pub fn save_model_to(w: &mut impl Write, model: &PyramidModel) -> Result<()> {
    writeln!(w, "{CKPT_MAGIC}")?;
    let cfg = config_block(model);
    writeln!(w, "config {}", cfg.len())?;
    w.write_all(cfg.as_bytes())?;
    let mut err = None;
    model.for_each_tensor(&mut |name, t| {
        if err.is_some() {
            return;
        }
        if let Err(e) = write_tensor(w, &name, t.shape(), t.iter().copied()) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    writeln!(w, "end")?;
    Ok(())
}

pub fn save_model(model: &PyramidModel, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_model_to(&mut f, model)
}

pub fn load_model_from(r: &mut impl BufRead) -> Result<PyramidModel> {
    let magic = read_line(r)?;
    if magic != CKPT_MAGIC {
        return Err(MooseError::format(format!(
            "expected {CKPT_MAGIC} checkpoint, got '{magic}'"
        )));
    }
    let cfg_line = read_line(r)?;
    let nbytes: usize = cfg_line
        .strip_prefix("config ")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| MooseError::format("missing config block"))?;
    let mut cfg_buf = vec![0u8; nbytes];
    r.read_exact(&mut cfg_buf)?;
    let cfg_text = String::from_utf8(cfg_buf).map_err(|_| MooseError::format("bad config text"))?;
    let (pcfg, hcfg, with_probes, seed) = parse_config_block(&cfg_text)?;
    let mut model = if with_probes {
        build_model(&pcfg, &hcfg, seed).or_else(|_| {
            // single-dilation variants carry equal dilations
            crate::model::build_model_single_dilation(&pcfg, &hcfg, pcfg.branch_dilations[0], seed)
        })?
    } else {
        build_base_only(&pcfg, &hcfg, seed)?
    };

    let entries = read_tensors(r)?;
    let mut expected = std::collections::HashSet::new();
    model.for_each_tensor(&mut |name, _| {
        expected.insert(name);
    });
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !expected.contains(&e.name) {
            return Err(MooseError::format(format!("unexpected tensor '{}'", e.name)));
        }
        if !model.set_tensor(&e.name, &e.data) {
            return Err(MooseError::format(format!("cannot assign tensor '{}'", e.name)));
        }
        seen.insert(e.name.clone());
    }
    if seen.len() != expected.len() {
        let missing: Vec<_> = expected.difference(&seen).take(3).cloned().collect();
        return Err(MooseError::format(format!(
            "checkpoint missing {} tensors (e.g. {missing:?})",
            expected.len() - seen.len()
        )));
    }
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<PyramidModel> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load_model_from(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;

    fn tiny() -> PyramidModel {
        let pcfg = PyramidConfig {
            num_classes: 4,
            encoder_channels: 16,
            branch_dilations: vec![1, 3],
            branch_channels: 8,
            include_global_pool_branch: true,
            output_stride: 8,
        };
        let hcfg = ProbeConfig {
            depth: 1,
            projection_channels: 8,
        };
        build_model(&pcfg, &hcfg, 21).unwrap()
    }

    #[test]
    fn model_roundtrips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = tiny();
        // perturb some state so we are not round-tripping pristine init
        model.visit_params_mut(ParamGroup::All, &mut |_, p| {
            p.value.mapv_inplace(|v| v * 1.5 + 0.01)
        });
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model.digest(ParamGroup::All), loaded.digest(ParamGroup::All));
        assert_eq!(model.pcfg, loaded.pcfg);
        assert_eq!(model.hcfg, loaded.hcfg);
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny();
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, "not-a-checkpoint\n").unwrap();
        assert!(load_model(&path).is_err());
    }
}
