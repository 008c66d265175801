//! Minimal static SVG line charts: mean curves with +/- one standard
//! deviation bands, dashed strokes for pretrained runs, solid for scratch.

/// One curve with its uncertainty band.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub color: String,
    pub dashed: bool,
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 52.0;
const MARGIN_R: f64 = 14.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;

fn fmt(v: f64) -> String {
    format!("{:.1}", (v * 1000.0).round() / 1000.0)
}

fn panel_svg(title: &str, series: &[Series], ox: f64, oy: f64, out: &mut String) {
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let x0 = ox + MARGIN_L;
    let y0 = oy + MARGIN_T;

    let epochs = series.iter().map(|s| s.mean.len()).max().unwrap_or(2).max(2);
    let x_of = |epoch: usize| x0 + plot_w * epoch as f64 / (epochs - 1) as f64;
    // accuracy axis fixed to [0, 1]
    let y_of = |acc: f64| y0 + plot_h * (1.0 - acc.clamp(0.0, 1.0));

    out.push_str(&format!(
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"white\" stroke=\"#444\" stroke-width=\"1\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" \
         font-family=\"sans-serif\">{}</text>\n",
        x0 + plot_w / 2.0,
        oy + 18.0,
        title
    ));

    // y ticks at 0, 0.25, 0.5, 0.75, 1
    for i in 0..=4 {
        let acc = i as f64 / 4.0;
        let y = y_of(acc);
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\" stroke-width=\"0.5\"/>\n",
            x0 + plot_w
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\" \
             font-family=\"sans-serif\">{}</text>\n",
            x0 - 5.0,
            y + 3.5,
            fmt(acc)
        ));
    }
    // x ticks: 5 evenly spaced epochs
    for i in 0..=4 {
        let epoch = (epochs - 1) * i / 4;
        let x = x_of(epoch);
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\" \
             font-family=\"sans-serif\">{epoch}</text>\n",
            y0 + plot_h + 14.0
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" \
         font-family=\"sans-serif\">inference epoch</text>\n",
        x0 + plot_w / 2.0,
        y0 + plot_h + 30.0
    ));

    for s in series {
        if s.mean.len() < 2 {
            continue;
        }
        // band: mean + std forward, mean - std backward
        let mut band = String::new();
        for (e, (&m, &sd)) in s.mean.iter().zip(&s.std).enumerate() {
            band.push_str(&format!("{:.2},{:.2} ", x_of(e), y_of(m + sd)));
        }
        for (e, (&m, &sd)) in s.mean.iter().zip(&s.std).enumerate().rev() {
            band.push_str(&format!("{:.2},{:.2} ", x_of(e), y_of(m - sd)));
        }
        out.push_str(&format!(
            "<polygon points=\"{}\" fill=\"{}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
            band.trim_end(),
            s.color
        ));
        let mut line = String::new();
        for (e, &m) in s.mean.iter().enumerate() {
            line.push_str(&format!("{:.2},{:.2} ", x_of(e), y_of(m)));
        }
        let dash = if s.dashed {
            " stroke-dasharray=\"6,3\""
        } else {
            ""
        };
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.6\"{dash}/>\n",
            line.trim_end(),
            s.color
        ));
    }

    // legend in the lower-right corner of the panel
    let legend_x = x0 + plot_w - 118.0;
    let mut legend_y = y0 + plot_h - 8.0 - 13.0 * series.len() as f64;
    for s in series {
        let dash = if s.dashed {
            " stroke-dasharray=\"6,3\""
        } else {
            ""
        };
        out.push_str(&format!(
            "<line x1=\"{legend_x}\" y1=\"{legend_y}\" x2=\"{}\" y2=\"{legend_y}\" \
             stroke=\"{}\" stroke-width=\"1.6\"{dash}/>\n",
            legend_x + 22.0,
            s.color
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"9\" font-family=\"sans-serif\">{}</text>\n",
            legend_x + 26.0,
            legend_y + 3.0,
            s.label
        ));
        legend_y += 13.0;
    }
}

/// Renders panels into one SVG document laid out `cols` per row.
pub fn panel_grid(panels: &[(String, &[Series])], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols);
    let width = PANEL_W * cols as f64;
    let height = PANEL_H * rows as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, (title, series)) in panels.iter().enumerate() {
        let ox = (i % cols) as f64 * PANEL_W;
        let oy = (i / cols) as f64 * PANEL_H;
        panel_svg(title, series, ox, oy, &mut out);
    }
    out.push_str("</svg>\n");
    out
}
