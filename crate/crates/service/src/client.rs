//! Blocking HTTP clients for external embedder and generator adapters.

use std::collections::HashMap;
use std::time::Duration;

use needle_core::adapter::{
    decode_png_b64, encode_png_b64, AdapterError, AdapterKind, EmbedRequest, EmbedResponse, Embedder, ErrorBody,
    GenerateRequest, GenerateResponse, Generator, ImagePayload, InfoResponse, Raster,
};
use needle_core::{EmbedderDescriptor, GeneratorDescriptor};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Responses carry base64 PNGs; allow far more than ureq's default cap.
const BODY_LIMIT: u64 = 512 << 20;

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn url(base: &str, path: &str) -> String {
    format!("{}{path}", base.trim_end_matches('/'))
}

/// Sends a request and decodes the JSON answer. Transport failures map to
/// `Unreachable`, 4xx answers to `Rejected`, anything else malformed to
/// `Protocol`.
fn exchange<Req: Serialize, Resp: DeserializeOwned>(
    agent: &ureq::Agent,
    id: &str,
    url: &str,
    body: Option<&Req>,
) -> Result<Resp, AdapterError> {
    let sent = match body {
        Some(b) => agent.post(url).send_json(b),
        None => agent.get(url).call(),
    };
    let mut resp = sent.map_err(|e| AdapterError::unreachable(id, format!("{url}: {e}")))?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .with_config()
        .limit(BODY_LIMIT)
        .read_to_string()
        .map_err(|e| AdapterError::protocol(id, format!("reading body: {e}")))?;
    if !(200..300).contains(&status) {
        let msg = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| format!("{}: {}", b.code, b.message))
            .unwrap_or(text);
        return Err(if (400..500).contains(&status) {
            AdapterError::rejected(id, format!("HTTP {status}: {msg}"))
        } else {
            AdapterError::protocol(id, format!("HTTP {status}: {msg}"))
        });
    }
    serde_json::from_str(&text).map_err(|e| AdapterError::protocol(id, format!("bad response JSON: {e}")))
}

/// Fetches `GET /v1/info` and checks kind and id.
pub fn fetch_info(endpoint: &str, id: &str, kind: AdapterKind, timeout: Duration) -> Result<InfoResponse, AdapterError> {
    let info: InfoResponse = exchange::<(), _>(&agent(timeout), id, &url(endpoint, "/v1/info"), None)?;
    if info.kind != kind || info.id != id {
        return Err(AdapterError::protocol(
            id,
            format!("info reports {:?} {:?}, expected {kind:?} {id:?}", info.kind, info.id),
        ));
    }
    if kind == AdapterKind::Embedder && !matches!(info.dim, Some(d) if d > 0) {
        return Err(AdapterError::protocol(id, "embedder info lacks a positive dim"));
    }
    Ok(info)
}

pub struct HttpEmbedder {
    descriptor: EmbedderDescriptor,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    /// With `dim = None` the dimension is read from the adapter's info.
    pub fn connect(id: &str, endpoint: &str, dim: Option<usize>, timeout: Duration) -> Result<Self, AdapterError> {
        let dim = match dim {
            Some(d) => d,
            None => fetch_info(endpoint, id, AdapterKind::Embedder, timeout)?.dim.expect("checked"),
        };
        Ok(Self {
            descriptor: EmbedderDescriptor::new(id, dim, endpoint),
            agent: agent(timeout),
        })
    }
}

impl Embedder for HttpEmbedder {
    fn descriptor(&self) -> &EmbedderDescriptor {
        &self.descriptor
    }

    fn embed(&self, images: &[&Raster]) -> Result<Vec<Vec<f32>>, AdapterError> {
        let id = self.descriptor.embedder_id.as_str();
        let req = EmbedRequest {
            embedder_id: id.to_owned(),
            images: images
                .iter()
                .enumerate()
                .map(|(i, img)| ImagePayload {
                    id: i.to_string(),
                    png_b64: encode_png_b64(img),
                })
                .collect(),
        };
        let resp: EmbedResponse = exchange(&self.agent, id, &url(&self.descriptor.endpoint, "/v1/embed"), Some(&req))?;
        check_embed_response(id, self.descriptor.dim, images.len(), resp)
    }
}

/// Validates an embed answer and returns vectors in request order.
pub fn check_embed_response(id: &str, dim: usize, n: usize, resp: EmbedResponse) -> Result<Vec<Vec<f32>>, AdapterError> {
    if resp.dim != dim {
        return Err(AdapterError::dim_mismatch(id, dim, resp.dim));
    }
    if resp.vectors.len() != n {
        return Err(AdapterError::protocol(id, format!("sent {n} images, got {} vectors", resp.vectors.len())));
    }
    let mut by_id: HashMap<String, Vec<f32>> = HashMap::with_capacity(n);
    for v in resp.vectors {
        if v.values.len() != dim {
            return Err(AdapterError::dim_mismatch(id, dim, v.values.len()));
        }
        if by_id.insert(v.id.clone(), v.values).is_some() {
            return Err(AdapterError::protocol(id, format!("duplicate vector id {:?}", v.id)));
        }
    }
    (0..n)
        .map(|i| {
            by_id
                .remove(&i.to_string())
                .ok_or_else(|| AdapterError::protocol(id, format!("no vector for image {i}")))
        })
        .collect()
}

pub struct HttpGenerator {
    descriptor: GeneratorDescriptor,
    agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(id: &str, endpoint: &str, sizes: Vec<(u32, u32)>, timeout: Duration) -> Self {
        let mut descriptor = GeneratorDescriptor::new(id, endpoint);
        descriptor.supported_sizes = sizes;
        Self {
            descriptor,
            agent: agent(timeout),
        }
    }
}

impl Generator for HttpGenerator {
    fn descriptor(&self) -> &GeneratorDescriptor {
        &self.descriptor
    }

    fn generate(&self, prompt: &str, count: usize, size: (u32, u32), seed: u64) -> Result<Vec<(u64, Raster)>, AdapterError> {
        let id = self.descriptor.generator_id.as_str();
        let req = GenerateRequest {
            prompt: prompt.to_owned(),
            count,
            width: size.0,
            height: size.1,
            seed,
        };
        let resp: GenerateResponse = exchange(&self.agent, id, &url(&self.descriptor.endpoint, "/v1/generate"), Some(&req))?;
        check_generate_response(id, count, size, seed, resp)
    }
}

/// Validates a generate answer: `count` decodable images of `size` with
/// seeds `seed, seed + 1, ..`.
pub fn check_generate_response(
    id: &str,
    count: usize,
    size: (u32, u32),
    seed: u64,
    resp: GenerateResponse,
) -> Result<Vec<(u64, Raster)>, AdapterError> {
    if resp.images.len() != count {
        return Err(AdapterError::protocol(id, format!("asked for {count} images, got {}", resp.images.len())));
    }
    resp.images
        .into_iter()
        .enumerate()
        .map(|(j, img)| {
            let want = seed.wrapping_add(j as u64);
            if img.seed != want {
                return Err(AdapterError::protocol(id, format!("image {j} has seed {}, expected {want}", img.seed)));
            }
            let raster = decode_png_b64(&img.png_b64).map_err(|e| AdapterError::protocol(id, format!("image {j}: {e}")))?;
            if raster.dimensions() != size {
                return Err(AdapterError::protocol(
                    id,
                    format!("image {j} is {:?}, expected {size:?}", raster.dimensions()),
                ));
            }
            Ok((want, raster))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use needle_core::adapter::{AdapterErrorKind, GeneratedImage, VectorPayload};

    fn vp(id: &str, values: Vec<f32>) -> VectorPayload {
        VectorPayload { id: id.into(), values }
    }

    #[test]
    fn embed_response_reordered_by_id() {
        let resp = EmbedResponse {
            dim: 2,
            vectors: vec![vp("1", vec![0.0, 1.0]), vp("0", vec![1.0, 0.0])],
        };
        assert_eq!(check_embed_response("e", 2, 2, resp).unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn embed_response_dim_mismatch() {
        let resp = EmbedResponse {
            dim: 3,
            vectors: vec![vp("0", vec![1.0, 0.0, 0.0])],
        };
        let err = check_embed_response("e", 2, 1, resp).unwrap_err();
        assert_eq!(err.adapter_id, "e");
        assert_eq!(err.kind, AdapterErrorKind::DimMismatch { expected: 2, got: 3 });
        let short = EmbedResponse {
            dim: 2,
            vectors: vec![vp("0", vec![1.0])],
        };
        assert!(matches!(check_embed_response("e", 2, 1, short).unwrap_err().kind, AdapterErrorKind::DimMismatch { .. }));
        let missing = EmbedResponse {
            dim: 2,
            vectors: vec![vp("7", vec![1.0, 0.0])],
        };
        assert!(matches!(check_embed_response("e", 2, 1, missing).unwrap_err().kind, AdapterErrorKind::Protocol(_)));
    }

    #[test]
    fn generate_response_checks_count_seed_and_size() {
        let img = |seed, w| GeneratedImage {
            seed,
            png_b64: encode_png_b64(&Raster::new(w, 4)),
        };
        let ok = GenerateResponse {
            images: vec![img(5, 4), img(6, 4)],
        };
        assert_eq!(check_generate_response("g", 2, (4, 4), 5, ok).unwrap().len(), 2);
        let bad_seed = GenerateResponse {
            images: vec![img(5, 4), img(9, 4)],
        };
        assert!(check_generate_response("g", 2, (4, 4), 5, bad_seed).is_err());
        let bad_size = GenerateResponse { images: vec![img(0, 3)] };
        assert!(check_generate_response("g", 1, (4, 4), 0, bad_size).is_err());
        let short = GenerateResponse { images: vec![] };
        assert!(check_generate_response("g", 1, (4, 4), 0, short).is_err());
    }

    #[test]
    fn unreachable_endpoint() {
        // Port 9 on loopback is reliably closed in the sandbox.
        let e = HttpEmbedder::connect("e", "http://127.0.0.1:9", Some(4), Duration::from_secs(2)).unwrap();
        let err = e.embed(&[&Raster::new(2, 2)]).unwrap_err();
        assert!(matches!(err.kind, AdapterErrorKind::Unreachable(_)), "{err}");
        assert_eq!(err.adapter_id, "e");
    }
}
