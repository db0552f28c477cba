//! Minimal SVG rendering of a closed-loop trace: stacked panels for the
//! measured outputs against their references, the applied inputs, and the
//! per-step optimal cost. No styling dependencies, just polylines.

use gru_mpc::sim::ClosedLoopTrace;

const WIDTH: f64 = 880.0;
const PANEL_HEIGHT: f64 = 210.0;
const GAP: f64 = 34.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 16.0;
const PALETTE: [&str; 6] = [
    "#1f6fb4", "#d62728", "#2e9e4f", "#8a56bd", "#e08214", "#6b5b4a",
];

struct Panel {
    top: f64,
    lo: f64,
    hi: f64,
    n: usize,
}

impl Panel {
    fn new(top: f64, lo: f64, hi: f64, n: usize) -> Panel {
        let (lo, hi) = if (hi - lo).abs() < 1e-12 {
            (lo - 1.0, hi + 1.0)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        };
        Panel { top, lo, hi, n }
    }

    fn x(&self, k: usize) -> f64 {
        let usable = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        MARGIN_LEFT + usable * (k as f64) / ((self.n - 1).max(1) as f64)
    }

    fn y(&self, v: f64) -> f64 {
        self.top + PANEL_HEIGHT * (1.0 - (v - self.lo) / (self.hi - self.lo))
    }

    fn polyline(&self, series: impl Iterator<Item = f64>, color: &str, dashed: bool) -> String {
        let points: Vec<String> = series
            .enumerate()
            .map(|(k, v)| format!("{:.2},{:.2}", self.x(k), self.y(v)))
            .collect();
        let dash = if dashed {
            " stroke-dasharray=\"6 4\""
        } else {
            ""
        };
        format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"{dash} points=\"{}\"/>\n",
            points.join(" ")
        )
    }

    fn frame(&self, title: &str) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#888\" stroke-width=\"1\"/>\n",
            MARGIN_LEFT,
            self.top,
            WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
            PANEL_HEIGHT
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\" fill=\"#333\">{title}</text>\n",
            MARGIN_LEFT,
            self.top - 8.0
        ));
        for (v, anchor_y) in [(self.hi, self.top + 12.0), (self.lo, self.top + PANEL_HEIGHT - 3.0)] {
            s.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{anchor_y:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#555\" text-anchor=\"end\">{v:.3}</text>\n",
                MARGIN_LEFT - 6.0
            ));
        }
        s
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Renders the whole trace as a standalone SVG document.
pub fn render(trace: &ClosedLoopTrace) -> String {
    let rows = &trace.rows;
    let n = rows.len();
    let n_y = rows[0].y.len();
    let n_u = rows[0].u.len();

    let total_height = 3.0 * (PANEL_HEIGHT + GAP) + GAP;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH:.0}\" height=\"{total_height:.0}\" viewBox=\"0 0 {WIDTH:.0} {total_height:.0}\">\n"
    ));
    out.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    let (y_lo, y_hi) = range(
        rows.iter()
            .flat_map(|r| r.y.iter().chain(r.y_ref.iter()).copied()),
    );
    let output_panel = Panel::new(GAP + 10.0, y_lo, y_hi, n);
    out.push_str(&output_panel.frame("output and reference"));
    for i in 0..n_y {
        let color = PALETTE[i % PALETTE.len()];
        out.push_str(&output_panel.polyline(rows.iter().map(|r| r.y_ref[i]), color, true));
        out.push_str(&output_panel.polyline(rows.iter().map(|r| r.y[i]), color, false));
    }

    let (u_lo, u_hi) = range(rows.iter().flat_map(|r| r.u.iter().copied()));
    let input_panel = Panel::new(GAP + 10.0 + PANEL_HEIGHT + GAP, u_lo, u_hi, n);
    out.push_str(&input_panel.frame("applied input"));
    for j in 0..n_u {
        let color = PALETTE[(n_y + j) % PALETTE.len()];
        out.push_str(&input_panel.polyline(rows.iter().map(|r| r.u[j]), color, false));
    }

    let (c_lo, c_hi) = range(rows.iter().map(|r| r.cost));
    let cost_panel = Panel::new(GAP + 10.0 + 2.0 * (PANEL_HEIGHT + GAP), c_lo.min(0.0), c_hi, n);
    out.push_str(&cost_panel.frame("optimal cost"));
    out.push_str(&cost_panel.polyline(rows.iter().map(|r| r.cost), PALETTE[4], false));

    out.push_str("</svg>\n");
    out
}
