//! Minimal deterministic SVG document builder shared by the reliability
//! diagram and the attribution overlay. All numbers are written with fixed
//! precision so identical inputs produce byte-identical documents.

pub struct SvgDoc {
    width: f64,
    height: f64,
    body: String,
}

pub fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

impl SvgDoc {
    pub fn new(width: f64, height: f64) -> Self {
        SvgDoc {
            width,
            height,
            body: String::new(),
        }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, opacity: f64) {
        self.body.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\" fill-opacity=\"{}\"/>\n",
            fmt(x),
            fmt(y),
            fmt(w),
            fmt(h),
            fill,
            fmt(opacity)
        ));
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dashed: bool) {
        let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
        self.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"1\"{}/>\n",
            fmt(x1),
            fmt(y1),
            fmt(x2),
            fmt(y2),
            stroke,
            dash
        ));
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, content: &str) {
        self.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"{}\" font-family=\"monospace\">{}</text>\n",
            fmt(x),
            fmt(y),
            fmt(size),
            escape(content)
        ));
    }

    pub fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n{}</svg>\n",
            fmt(self.width),
            fmt(self.height),
            fmt(self.width),
            fmt(self.height),
            fmt(self.width),
            fmt(self.height),
            self.body
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_are_deterministic() {
        let build = || {
            let mut doc = SvgDoc::new(100.0, 50.0);
            doc.rect(1.0, 2.0, 3.0, 4.0, "red", 0.5);
            doc.line(0.0, 0.0, 10.0, 10.0, "black", true);
            doc.text(5.0, 5.0, 10.0, "ECE = 0.110 <&>");
            doc.finish()
        };
        assert_eq!(build(), build());
        assert!(build().contains("&lt;&amp;&gt;"));
    }
}
