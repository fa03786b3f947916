//! Markdown and CSV report emitters. The markdown tables mirror the
//! row/column layout of the knowledge-probing result tables so desk-scale
//! runs read the same way as the reference numbers.

use std::fmt::Write as _;

use keynav::cluster::GroupReport;

/// One category's InTop/OutTop pair plus the count of unknown labels that
/// were excluded from the accuracy denominators.
pub struct GroupRow {
    pub category: String,
    pub in_top: GroupReport,
    pub out_top: GroupReport,
    pub unknown: usize,
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt2).unwrap_or_else(|| "-".to_string())
}

/// InTop/OutTop accuracy, rank and proportion per category:
///
/// | Category | <cat> |  |
/// | Group | InTop | OutTop |
/// | Accuracy | .. | .. |
pub fn render_group_table(rows: &[GroupRow]) -> String {
    let mut out = String::new();
    let mut header = String::from("| Category |");
    let mut divider = String::from("|---|");
    let mut group = String::from("| Group |");
    for row in rows {
        write!(header, " {} | |", row.category).unwrap();
        divider.push_str("---|---|");
        group.push_str(" InTop | OutTop |");
    }
    out.push_str(&header);
    out.push('\n');
    out.push_str(&divider);
    out.push('\n');
    out.push_str(&group);
    out.push('\n');

    for (label, cell) in [
        ("Accuracy", &(|r: &GroupRow| {
            (fmt_opt(r.in_top.accuracy), fmt_opt(r.out_top.accuracy))
        }) as &dyn Fn(&GroupRow) -> (String, String)),
        ("Rank", &|r: &GroupRow| {
            (fmt_opt(r.in_top.avg_rank), fmt_opt(r.out_top.avg_rank))
        }),
        ("Proportion", &|r: &GroupRow| {
            (fmt2(r.in_top.proportion), fmt2(r.out_top.proportion))
        }),
        ("Members", &|r: &GroupRow| {
            (
                r.in_top.member_count.to_string(),
                r.out_top.member_count.to_string(),
            )
        }),
    ] {
        let mut line = format!("| {label} |");
        for row in rows {
            let (a, b) = cell(row);
            write!(line, " {a} | {b} |").unwrap();
        }
        out.push_str(&line);
        out.push('\n');
    }

    let unknown_total: usize = rows.iter().map(|r| r.unknown).sum();
    if unknown_total > 0 {
        out.push('\n');
        for row in rows.iter().filter(|r| r.unknown > 0) {
            writeln!(
                out,
                "- {}: {} token(s) with unknown correctness excluded from both groups",
                row.category, row.unknown
            )
            .unwrap();
        }
    }
    out
}

/// One (category, strategy) cell of the probing comparison table.
pub struct StrategyCell {
    pub category: String,
    pub strategy: String,
    pub map: f64,
    pub prec: f64,
}

/// MAP/PREC per strategy and category:
///
/// | Category | <cat> |  |
/// | Metric | MAP | PREC |
/// | vanilla | .. | .. |
pub fn render_strategy_table(cells: &[StrategyCell]) -> String {
    let mut categories: Vec<String> = Vec::new();
    let mut strategies: Vec<String> = Vec::new();
    for c in cells {
        if !categories.contains(&c.category) {
            categories.push(c.category.clone());
        }
        if !strategies.contains(&c.strategy) {
            strategies.push(c.strategy.clone());
        }
    }

    let mut out = String::new();
    let mut header = String::from("| Category |");
    let mut divider = String::from("|---|");
    let mut metric = String::from("| Metric |");
    for cat in &categories {
        write!(header, " {cat} | |").unwrap();
        divider.push_str("---|---|");
        metric.push_str(" MAP | PREC |");
    }
    out.push_str(&header);
    out.push('\n');
    out.push_str(&divider);
    out.push('\n');
    out.push_str(&metric);
    out.push('\n');

    for strategy in &strategies {
        let mut line = format!("| {strategy} |");
        for cat in &categories {
            match cells
                .iter()
                .find(|c| &c.category == cat && &c.strategy == strategy)
            {
                Some(c) => write!(line, " {} | {} |", fmt2(c.map), fmt2(c.prec)).unwrap(),
                None => line.push_str(" - | - |"),
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Trailer appended to every markdown report.
pub fn provenance_footer(config_hash: &str, seed: u64) -> String {
    format!("\nconfig_hash: `{config_hash}` seed: `{seed}`\n")
}

/// Comment line prepended to every CSV.
pub fn csv_provenance(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash} seed={seed}\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use keynav::cluster::GroupKind;

    fn report(kind: GroupKind, acc: f64, rank: f64, prop: f64, n: usize) -> GroupReport {
        GroupReport {
            group: kind,
            accuracy: Some(acc),
            avg_rank: Some(rank),
            proportion: prop,
            member_count: n,
        }
    }

    #[test]
    fn group_table_mirrors_reference_layout() {
        let rows = vec![GroupRow {
            category: "Sports League".into(),
            in_top: report(GroupKind::InTop, 50.12, 54.01, 50.89, 46),
            out_top: report(GroupKind::OutTop, 60.36, 56.97, 49.11, 44),
            unknown: 0,
        }];
        let md = render_group_table(&rows);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| Category | Sports League | |");
        assert_eq!(lines[2], "| Group | InTop | OutTop |");
        assert!(lines[3].starts_with("| Accuracy | 50.12 | 60.36 |"));
        assert!(lines[4].starts_with("| Rank | 54.01 | 56.97 |"));
        assert!(lines[5].starts_with("| Proportion | 50.89 | 49.11 |"));
    }

    #[test]
    fn empty_group_renders_dashes() {
        let rows = vec![GroupRow {
            category: "X".into(),
            in_top: GroupReport {
                group: GroupKind::InTop,
                accuracy: None,
                avg_rank: None,
                proportion: 0.0,
                member_count: 0,
            },
            out_top: report(GroupKind::OutTop, 100.0, 55.0, 100.0, 90),
            unknown: 2,
        }];
        let md = render_group_table(&rows);
        assert!(md.contains("| Accuracy | - | 100.00 |"));
        assert!(md.contains("2 token(s) with unknown correctness"));
    }

    #[test]
    fn strategy_table_rows_are_strategies() {
        let cells = vec![
            StrategyCell {
                category: "City".into(),
                strategy: "vanilla".into(),
                map: 91.57,
                prec: 85.20,
            },
            StrategyCell {
                category: "City".into(),
                strategy: "icn".into(),
                map: 96.38,
                prec: 93.20,
            },
        ];
        let md = render_strategy_table(&cells);
        assert!(md.contains("| vanilla | 91.57 | 85.20 |"));
        assert!(md.contains("| icn | 96.38 | 93.20 |"));
    }
}
