//! Progress output: plain lines for humans, JSON lines behind --json.

pub struct Progress {
    json: bool,
}

impl Progress {
    pub fn new(json: bool) -> Progress {
        Progress { json }
    }

    pub fn event(&self, kind: &str, fields: serde_json::Value) {
        if self.json {
            let mut obj = serde_json::json!({ "event": kind });
            if let (Some(o), Some(f)) = (obj.as_object_mut(), fields.as_object()) {
                for (k, v) in f {
                    o.insert(k.clone(), v.clone());
                }
            }
            println!("{obj}");
        } else {
            let body = fields
                .as_object()
                .map(|o| {
                    o.iter()
                        .map(|(k, v)| format!("{k}={v}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .unwrap_or_default();
            println!("[{kind}] {body}");
        }
    }
}
