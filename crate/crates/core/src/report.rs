//! Figure data derived from an evolution history: best-so-far weight
//! trajectories, the final-weights heatmap (CSV grid and SVG), and the
//! fitness curve.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::evolution::{initial_population_size, Individual};
use crate::model::Modality;
use crate::weights::{LossKey, LossWeights};

/// Heatmap row order.
pub const HEATMAP_ROWS: [Modality; 4] = [Modality::Rgb, Modality::Flow, Modality::Grey, Modality::Audio];
/// Heatmap column order.
pub const HEATMAP_COLUMNS: [&str; 9] = ["S", "B", "C", "A", "P", "F", "E", "D1", "D2"];

fn heatmap_key(row: Modality, column: &str) -> Option<LossKey> {
    LossKey::ALL
        .into_iter()
        .find(|k| k.row() == row && k.column() == column)
}

/// Replayed population state after initialization and after each round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub evaluations: usize,
    /// Fitness evaluated in this round (the best initial fitness for round 0).
    pub round_best: f64,
    pub best_so_far: f64,
    pub population_mean: f64,
    /// Best member of the population after this round.
    pub best: Individual,
}

fn fitness_of(i: &Individual) -> Result<f64> {
    i.fitness
        .ok_or_else(|| Error::format("history", format!("individual {} has no fitness", i.id)))
}

/// Best member, ties broken by smaller id.
fn best_member(population: &[Individual]) -> Result<&Individual> {
    let mut best = &population[0];
    for i in &population[1..] {
        let (fi, fb) = (fitness_of(i)?, fitness_of(best)?);
        if fi > fb || (fi == fb && i.id < best.id) {
            best = i;
        }
    }
    Ok(best)
}

fn worst_index(population: &[Individual]) -> Result<usize> {
    let mut worst = 0;
    for (n, i) in population.iter().enumerate().skip(1) {
        let (fi, fw) = (fitness_of(i)?, fitness_of(&population[worst])?);
        if fi < fw || (fi == fw && i.id > population[worst].id) {
            worst = n;
        }
    }
    Ok(worst)
}

/// Replays elitist truncation over a history.
pub fn summarize(history: &[Individual]) -> Result<Vec<RoundSummary>> {
    let p = initial_population_size(history);
    if p < 2 {
        return Err(Error::format("history", "needs an initial population of at least 2"));
    }
    let mut population = history[..p].to_vec();
    let mean = |pop: &[Individual]| -> Result<f64> {
        Ok(pop.iter().map(fitness_of).sum::<Result<f64>>()? / pop.len() as f64)
    };
    let best = best_member(&population)?.clone();
    let mut out = vec![RoundSummary {
        round: 0,
        evaluations: p,
        round_best: fitness_of(&best)?,
        best_so_far: fitness_of(&best)?,
        population_mean: mean(&population)?,
        best,
    }];
    for (n, child) in history[p..].iter().enumerate() {
        let round = n + 1;
        if child.parent_id.is_none() || child.birth_round != round {
            return Err(Error::format("history", format!("record {} is out of round order", child.id)));
        }
        let f = fitness_of(child)?;
        let w = worst_index(&population)?;
        if f > fitness_of(&population[w])? {
            population[w] = child.clone();
        }
        let best = best_member(&population)?.clone();
        out.push(RoundSummary {
            round,
            evaluations: p + round,
            round_best: f,
            best_so_far: fitness_of(&best)?,
            population_mean: mean(&population)?,
            best,
        });
    }
    Ok(out)
}

fn comment_line(comment: Option<&str>) -> String {
    comment.map(|c| format!("# {c}\n")).unwrap_or_default()
}

/// One row per round: the best-so-far individual and its weights.
pub fn trajectory_csv(summary: &[RoundSummary], comment: Option<&str>) -> String {
    let mut s = comment_line(comment);
    let keys: Vec<String> = LossKey::ALL.iter().map(|k| k.code()).collect();
    let _ = writeln!(s, "round,best_id,best_so_far,{}", keys.join(","));
    for r in summary {
        let w: Vec<String> = r.best.weights.values().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{},{},{},{}", r.round, r.best.id, r.best_so_far, w.join(","));
    }
    s
}

pub fn fitness_curve_csv(summary: &[RoundSummary], comment: Option<&str>) -> String {
    let mut s = comment_line(comment);
    let _ = writeln!(s, "round,evaluations,round_best,best_so_far,population_mean");
    for r in summary {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.round, r.evaluations, r.round_best, r.best_so_far, r.population_mean
        );
    }
    s
}

/// Grid of weights: rows R, F, G, A; columns by task letter and
/// distillation layer. Cells with no corresponding weight are empty.
pub fn heatmap_csv(w: &LossWeights, comment: Option<&str>) -> String {
    let mut s = comment_line(comment);
    let _ = writeln!(s, "modality,{}", HEATMAP_COLUMNS.join(","));
    for row in HEATMAP_ROWS {
        let cells: Vec<String> = HEATMAP_COLUMNS
            .iter()
            .map(|c| heatmap_key(row, c).map(|k| format!("{:.6}", w[k])).unwrap_or_default())
            .collect();
        let _ = writeln!(s, "{},{}", row.letter(), cells.join(","));
    }
    s
}

/// Parses a heatmap grid back into `(key, value)` cells.
pub fn parse_heatmap_csv(text: &str) -> Result<Vec<(LossKey, f64)>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::format("heatmap", "empty"))?;
    let expected = format!("modality,{}", HEATMAP_COLUMNS.join(","));
    if header != expected {
        return Err(Error::format("heatmap", "unexpected header"));
    }
    let mut cells = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let row = HEATMAP_ROWS
            .into_iter()
            .find(|m| f[0].len() == 1 && f[0].starts_with(m.letter()))
            .ok_or_else(|| Error::format("heatmap", format!("unknown row `{}`", f[0])))?;
        if f.len() != HEATMAP_COLUMNS.len() + 1 {
            return Err(Error::format("heatmap", format!("row {} has {} fields", f[0], f.len())));
        }
        for (c, v) in HEATMAP_COLUMNS.iter().zip(&f[1..]) {
            if v.is_empty() {
                continue;
            }
            let key = heatmap_key(row, c)
                .ok_or_else(|| Error::format("heatmap", format!("cell {}{} has no weight", f[0], c)))?;
            let value = v
                .parse()
                .map_err(|_| Error::format("heatmap", format!("bad value `{v}`")))?;
            cells.push((key, value));
        }
    }
    Ok(cells)
}

/// White-to-blue ramp.
fn color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

/// Self-contained SVG with one colored, labeled cell per weight.
pub fn heatmap_svg(w: &LossWeights) -> String {
    const CELL: usize = 56;
    const LEFT: usize = 40;
    const TOP: usize = 28;
    let width = LEFT + CELL * HEATMAP_COLUMNS.len() + 8;
    let height = TOP + CELL * HEATMAP_ROWS.len() + 8;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    for (c, label) in HEATMAP_COLUMNS.iter().enumerate() {
        let x = LEFT + c * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text x="{x}" y="18" text-anchor="middle">{label}</text>"#);
    }
    for (r, row) in HEATMAP_ROWS.iter().enumerate() {
        let y = TOP + r * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT / 2,
            y + CELL / 2 + 4,
            row.letter()
        );
        for (c, col) in HEATMAP_COLUMNS.iter().enumerate() {
            let Some(key) = heatmap_key(*row, col) else {
                continue;
            };
            let x = LEFT + c * CELL;
            let v = w[key];
            let ink = if v > 0.55 { "#ffffff" } else { "#000000" };
            let _ = writeln!(
                s,
                r##"<rect class="cell" data-key="{key}" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#888888"/>"##,
                color(v)
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.2}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
