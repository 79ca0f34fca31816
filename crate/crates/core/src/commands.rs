//! The pipeline stages behind the command-line subcommands. Each reads its
//! inputs from directories named in the [`RunConfig`], writes its outputs to
//! `config.out`, and records the config there as `run_config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::em::{init_random, model_canvas, run_em_observed, EmRun};
use crate::error::{Error, Result};
use crate::grid::{inverse_transform_grid, Dims, OccupancyGrid};
use crate::io::{read_pgm, write_pgm, write_png, write_png_rgb, PgmFormat};
use crate::model::{Expectations, HierModel};
use crate::segmentation::{extract_snapshots, Dataset};
use crate::selection::{leave_one_out, select_model};
use crate::synth::{gen_scenario, render_maps, GeneratorSpec};

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_text(path, &(text + "\n"))
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::InvalidParameter(format!("missing {what} directory")))
}

fn prepare(config: &RunConfig, command: &str) -> Result<()> {
    config.validate()?;
    config.record(command, &config.out)
}

/// Files named `map_<t>.pgm` in `dir`, ordered by `t`.
pub fn read_maps(dir: &Path) -> Result<Vec<OccupancyGrid>> {
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(t) = name
            .strip_prefix("map_")
            .and_then(|r| r.strip_suffix(".pgm"))
            .and_then(|t| t.parse().ok())
        {
            found.push((t, path));
        }
    }
    found.sort();
    if found.iter().enumerate().any(|(i, (t, _))| i != *t) {
        return Err(Error::InvalidParameter(format!("map files in {dir:?} are not numbered 0..T")));
    }
    found.into_iter().map(|(_, p)| read_pgm(&p)).collect()
}

/// Samples a scenario from the configured preset and writes it with one map per epoch.
pub fn cmd_generate(config: &RunConfig) -> Result<()> {
    prepare(config, "generate")?;
    let spec = GeneratorSpec::preset(&config.preset)?;
    let scenario = gen_scenario(&spec, config.seed)?;
    scenario.save(&config.out)?;
    for (t, map) in render_maps(&scenario).iter().enumerate() {
        write_pgm(&config.out.join(format!("map_{t}.pgm")), map, PgmFormat::Binary)?;
    }
    Ok(())
}

/// Extracts snapshots from the maps in `config.input`.
pub fn cmd_segment(config: &RunConfig) -> Result<Dataset> {
    prepare(config, "segment")?;
    let maps = read_maps(require(&config.input, "map input")?)?;
    let data = extract_snapshots(&maps, &config.segmentation)?;
    data.save(&config.out, &config.segmentation)?;
    Ok(data)
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    Ok(Dataset::load(require(&config.input, "dataset input")?)?.0)
}

/// Stacks rows of equally sized grids into one image, one row per frame,
/// with one-cell gaps.
fn strip(rows: &[Vec<OccupancyGrid>]) -> Option<OccupancyGrid> {
    let cols = rows.iter().map(Vec::len).max()?;
    let cell = rows.first()?.first()?.dims();
    let w = cols * (cell.width + 1);
    let h = rows.len() * (cell.height + 1);
    let mut out = OccupancyGrid::filled(Dims::new(w.max(1), h.max(1)), 1.0);
    for (r, row) in rows.iter().enumerate() {
        for (c, g) in row.iter().enumerate() {
            for y in 0..cell.height {
                for x in 0..cell.width {
                    out.set(c * (cell.width + 1) + x, r * (cell.height + 1) + y, g.value(x, y));
                }
            }
        }
    }
    Some(out)
}

/// Fits one model with the configured N and M (or the flat baseline) and
/// writes the model, the trace, and convergence strips.
pub fn cmd_learn(config: &RunConfig) -> Result<EmRun> {
    prepare(config, "learn")?;
    let data = load_dataset(config)?;
    let em = config.em_config();
    let n = config
        .n
        .ok_or_else(|| Error::InvalidParameter("learn needs N".into()))?;
    let m = if config.flat { n } else { config.m.unwrap_or(n) };
    em.validate()?;
    let canvas = model_canvas(&data, &em.pose_grid);
    let mut init = init_random(&data, n, m, canvas, &em)?;
    if config.flat {
        init.templates = init.objects.clone();
        init.flat = true;
    }
    let mut object_frames = Vec::new();
    let mut template_frames = Vec::new();
    let run = run_em_observed(&data, init, &em, &mut |_, model: &HierModel| {
        object_frames.push(model.objects.clone());
        template_frames.push(model.templates.clone());
    })?;
    run.model.save(&config.out.join("model"), &run.expectations)?;
    write_text(&config.out.join("trace.csv"), &run.trace.to_csv())?;
    let frames = config.out.join("frames");
    fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    if let Some(s) = strip(&object_frames) {
        write_pgm(&frames.join("objects_strip.pgm"), &s, PgmFormat::Binary)?;
    }
    if let Some(s) = strip(&template_frames) {
        write_pgm(&frames.join("templates_strip.pgm"), &s, PgmFormat::Binary)?;
    }
    Ok(run)
}

/// Searches over N and M; writes `selection.csv`, `selection.json`, and the
/// winning model.
pub fn cmd_select(config: &RunConfig) -> Result<(usize, usize)> {
    prepare(config, "select")?;
    let data = load_dataset(config)?;
    let result = select_model(&data, &config.em_config(), &config.selection)?;
    write_text(&config.out.join("selection.csv"), &result.to_csv())?;
    write_json(
        &config.out.join("selection.json"),
        &serde_json::json!({
            "penalty_n": result.penalty_n,
            "penalty_m": result.penalty_m,
            "restarts": config.selection.restarts,
            "best_pair": [result.best_pair.0, result.best_pair.1],
            "cells": result.cells,
        }),
    )?;
    if let Some(run) = result.best_model() {
        run.model.save(&config.out.join("model"), &run.expectations)?;
    }
    Ok(result.best_pair)
}

/// Leave-one-out comparison of the hierarchical and flat models; writes
/// `eval.csv` and `eval.json`.
pub fn cmd_eval(config: &RunConfig) -> Result<()> {
    prepare(config, "eval")?;
    let data = load_dataset(config)?;
    let n = config
        .n
        .ok_or_else(|| Error::InvalidParameter("eval needs N".into()))?;
    let m = config.m.unwrap_or(n);
    let report = leave_one_out(&data, n, m, &config.em_config(), config.selection.restarts)?;
    write_text(&config.out.join("eval.csv"), &report.to_csv())?;
    write_json(&config.out.join("eval.json"), &report)
}

/// Converts the model's PGMs to PNG and, when a dataset and its maps are
/// given, renders one overlay per epoch: the map in gray with the body of
/// each snapshot's most likely object, mapped back through its alignment, in red.
pub fn cmd_export(config: &RunConfig) -> Result<()> {
    prepare(config, "export")?;
    let model_dir = require(&config.input, "model input")?;
    let (model, exp) = HierModel::load(model_dir)?;
    for (m, t) in model.templates.iter().enumerate() {
        write_png(&config.out.join(format!("template_{m}.png")), t)?;
    }
    for (n, o) in model.objects.iter().enumerate() {
        write_png(&config.out.join(format!("object_{n}.png")), o)?;
    }
    let (Some(dataset_dir), Some(maps_dir)) = (&config.dataset, &config.maps) else {
        return Ok(());
    };
    let data = Dataset::load(dataset_dir)?.0;
    let maps = read_maps(maps_dir)?;
    model.check_data(&data)?;
    for (t, mask) in overlay_masks(&model, &exp, &data, &maps)?.iter().enumerate() {
        let map = &maps[t];
        let pixels: Vec<[u8; 3]> = (0..map.dims().len())
            .map(|j| {
                let g = crate::io::quantize(1.0 - map.cells()[j]);
                if mask[j] {
                    [255, 0, 0]
                } else {
                    [g, g, g]
                }
            })
            .collect();
        write_png_rgb(&config.out.join(format!("overlay_{t}.png")), map.dims(), &pixels)?;
    }
    Ok(())
}

/// Per epoch, the map cells covered by the bodies (value ≥ 0.5) of each
/// snapshot's most likely object placed back at the snapshot's location.
pub fn overlay_masks(model: &HierModel, exp: &Expectations, data: &Dataset, maps: &[OccupancyGrid]) -> Result<Vec<Vec<bool>>> {
    if maps.len() != data.num_epochs() {
        return Err(Error::InvalidParameter(format!(
            "{} maps for {} epochs",
            maps.len(),
            data.num_epochs()
        )));
    }
    let mut out = Vec::with_capacity(maps.len());
    for (t, snaps) in data.epochs().iter().enumerate() {
        let dims = maps[t].dims();
        let mut mask = vec![false; dims.len()];
        for (k, s) in snaps.iter().enumerate() {
            let row = &exp.alpha[t][k];
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            let back = inverse_transform_grid(&model.objects[best], &model.alignments[t][k], s.grid.dims());
            for y in 0..back.height() {
                for x in 0..back.width() {
                    let (mx, my) = (s.origin.0 + x, s.origin.1 + y);
                    let i = back.index(x, y);
                    if mx < dims.width && my < dims.height && back.known_value(i).is_some_and(|v| v >= 0.5) {
                        mask[my * dims.width + mx] = true;
                    }
                }
            }
        }
        out.push(mask);
    }
    Ok(out)
}
