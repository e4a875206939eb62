//! Static HTML pages comparing methods side by side, one page per goal.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::report::METHOD_ORDER;
use super::RunnerError;
use crate::backends::write_atomic;
use crate::plan::{parse_plan, MultimodalPlan};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GalleryOutcome {
    pub index: PathBuf,
    pub pages: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Every `*.plan` record under `dir`, in path order.
pub fn load_plans(dir: &Path) -> Result<Vec<MultimodalPlan>, RunnerError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.extension().is_some_and(|e| e == "plan") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths).map_err(|e| RunnerError::Io(format!("{}: {e}", dir.display())))?;
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| RunnerError::Io(format!("{}: {e}", p.display())))?;
            parse_plan(text.trim_end()).map_err(|e| RunnerError::Io(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

const STYLE: &str = "body{font-family:sans-serif;margin:1.5em}table{border-collapse:collapse}\
td,th{border:1px solid #ccc;padding:.4em;vertical-align:top;width:20em}img{max-width:100%}\
.missing{background:#fee;color:#900;padding:2em 0;text-align:center}";

/// Writes `index.html` plus one page per goal into `out`. Images are copied
/// from `image_root` into `out/assets/`; missing ones become placeholder cells
/// and are listed as warnings. Output depends only on the inputs.
pub fn export_gallery(plans: &[MultimodalPlan], image_root: &Path, out: &Path) -> Result<GalleryOutcome, RunnerError> {
    let mut by_goal: BTreeMap<(String, String), Vec<&MultimodalPlan>> = BTreeMap::new();
    for p in plans {
        by_goal.entry((p.goal.dataset.clone(), p.goal.id.clone())).or_default().push(p);
    }
    fs::create_dir_all(out)?;
    let mut pages = Vec::new();
    let mut warnings = Vec::new();
    let mut index = format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Plans</title><style>{STYLE}</style></head><body>\n<h1>Plans</h1>\n<ul>\n"
    );

    for ((dataset, goal_id), mut group) in by_goal {
        group.sort_by_key(|p| (METHOD_ORDER.iter().position(|m| *m == p.method), p.method));
        group.dedup_by_key(|p| p.method);
        let title = &group[0].goal.title;
        let file = format!("{}__{}.html", slug(&dataset), slug(&goal_id));
        let rows = group.iter().map(|p| p.steps.len()).max().unwrap_or(0);

        let mut page = format!(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{t}</title><style>{STYLE}</style></head><body>\n\
<p><a href=\"index.html\">index</a></p>\n<h1>{t}</h1>\n<p>{d} / {g}</p>\n<table>\n<tr><th>Step</th>",
            t = escape(title),
            d = escape(&dataset),
            g = escape(&goal_id)
        );
        for p in &group {
            let _ = write!(page, "<th>{}</th>", escape(p.method.as_str()));
        }
        page.push_str("</tr>\n");
        for i in 0..rows {
            let _ = write!(page, "<tr><td>{}</td>", i + 1);
            for p in &group {
                page.push_str("<td>");
                if let Some(step) = p.steps.get(i) {
                    if let Some(img) = &step.image {
                        let src = image_root.join(&img.locator);
                        let dst = out.join("assets").join(&img.locator);
                        match fs::read(&src) {
                            Ok(bytes) => {
                                if fs::read(&dst).ok().as_deref() != Some(bytes.as_slice()) {
                                    write_atomic(&dst, &bytes)?;
                                }
                                let _ = write!(page, "<img src=\"assets/{}\" alt=\"step {}\">", escape(&img.locator), i + 1);
                            }
                            Err(_) => {
                                warnings.push(format!(
                                    "{dataset}/{goal_id} {} step {}: missing image {}",
                                    p.method,
                                    i + 1,
                                    img.locator
                                ));
                                let _ = write!(page, "<div class=\"missing\">image missing<br>{}</div>", escape(&img.locator));
                            }
                        }
                    }
                    let _ = write!(page, "<p>{}</p>", escape(&step.text));
                }
                page.push_str("</td>");
            }
            page.push_str("</tr>\n");
        }
        page.push_str("</table>\n</body></html>\n");
        let path = out.join(&file);
        write_atomic(&path, page.as_bytes())?;
        pages.push(path);
        let methods: Vec<&str> = group.iter().map(|p| p.method.as_str()).collect();
        let _ = writeln!(
            index,
            "<li><a href=\"{}\">{}</a> <small>{} · {}</small></li>",
            escape(&file),
            escape(title),
            escape(&dataset),
            methods.join(", ")
        );
    }
    index.push_str("</ul>\n");
    if !warnings.is_empty() {
        index.push_str("<h2>Warnings</h2>\n<ul>\n");
        for w in &warnings {
            let _ = writeln!(index, "<li>{}</li>", escape(w));
        }
        index.push_str("</ul>\n");
    }
    index.push_str("</body></html>\n");
    let index_path = out.join("index.html");
    write_atomic(&index_path, index.as_bytes())?;
    for w in &warnings {
        tracing::warn!("{w}");
    }
    Ok(GalleryOutcome { index: index_path, pages, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{sample_plan, Method};

    #[test]
    fn two_methods_three_steps_with_missing_image() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("in");
        let mut a = sample_plan(Method::TipProcedure);
        let mut b = sample_plan(Method::BaselineNoBridge);
        a.steps.truncate(3);
        b.steps.truncate(3);
        assert_eq!(a.steps.len(), 3, "fixture has at least 3 steps");
        for s in &mut b.steps {
            s.image.as_mut().unwrap().locator = format!("images/b{}.png", s.index);
        }
        for s in a.steps.iter().chain(&b.steps) {
            let h = s.image.as_ref().unwrap();
            let p = images.join(&h.locator);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, b"bytes").unwrap();
        }
        let missing = b.steps[1].image.as_ref().unwrap().locator.clone();
        fs::remove_file(images.join(&missing)).unwrap();

        let out = dir.path().join("site");
        let g = export_gallery(&[b.clone(), a.clone()], &images, &out).unwrap();
        assert_eq!(g.pages.len(), 1);
        let html = fs::read_to_string(&g.pages[0]).unwrap();
        assert_eq!(html.matches("<th>").count(), 3, "step column + 2 methods");
        assert_eq!(html.matches("<tr><td>").count(), 3);
        assert!(html.find("baseline_no_bridge").unwrap() < html.find("tip_procedure").unwrap());
        assert!(html.contains("class=\"missing\""));
        assert_eq!(g.warnings.len(), 1);

        let first: Vec<Vec<u8>> = g.pages.iter().chain([&g.index]).map(|p| fs::read(p).unwrap()).collect();
        let again = export_gallery(&[a, b], &images, &out).unwrap();
        let second: Vec<Vec<u8>> = again.pages.iter().chain([&again.index]).map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn escapes_text() {
        assert_eq!(escape("<b>&\"'"), "&lt;b&gt;&amp;&quot;&#39;");
    }
}
