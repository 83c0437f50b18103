//! Deterministic simulated counting model.
//!
//! Scenes are sets of disks. A region's true count is the number of disks that
//! touch it, so an object straddling a tile boundary is seen by every tile it
//! touches; that is where tile sums pick up their overcount. Perception is
//! saturating-linear above `saturation_start`, which makes whole-image
//! answers on dense scenes come out low. Multiplicative noise is derived by
//! hashing `(seed, scene, region)`, so identical queries always get identical
//! replies.
//!
//! Images handed to the mock are small tag bitmaps naming a scene and a
//! region; [`SceneImage`] produces them, so the mock sits behind the same
//! [`VisionModel`] interface (in process or over HTTP) as a real endpoint.

use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::Arc;

use image::{DynamicImage, GrayImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::client::{ClientError, ModelReply, VisionModel, VisionQuery};
use crate::glce::ImageSource;
use crate::image_ops::{EncodedImage, ImageError, TileSpec};
use crate::model::{CountRange, ImageRecord};
use crate::seeds;
use crate::templates::{self, PromptShape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub scene_id: String,
    pub width: u32,
    pub height: u32,
    pub category: String,
    pub objects: Vec<SceneObject>,
}

impl SyntheticScene {
    pub fn true_count(&self) -> u64 {
        self.objects.len() as u64
    }

    /// Objects whose disk touches the closed rectangle of `region`.
    pub fn count_in(&self, region: &TileSpec) -> u64 {
        let (x0, y0) = (region.x as f64, region.y as f64);
        let (x1, y1) = (x0 + region.w as f64, y0 + region.h as f64);
        self.objects
            .iter()
            .filter(|o| {
                let dx = (x0 - o.cx).max(o.cx - x1).max(0.0);
                let dy = (y0 - o.cy).max(o.cy - y1).max(0.0);
                dx * dx + dy * dy <= o.r * o.r
            })
            .count() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockBehaviorProfile {
    /// Count above which perception starts to compress.
    pub saturation_start: f64,
    /// Slope of perceived vs. true count above saturation, in (0, 1).
    pub compression: f64,
    /// Standard deviation of the relative multiplicative noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Answer "more than" probes from the true regional count.
    pub exact_thresholds: bool,
}

impl Default for MockBehaviorProfile {
    fn default() -> Self {
        Self {
            saturation_start: 60.0,
            compression: 0.9,
            noise_sigma: 0.08,
            seed: 0,
            exact_thresholds: false,
        }
    }
}

impl MockBehaviorProfile {
    pub fn noiseless(self) -> Self {
        Self { noise_sigma: 0.0, ..self }
    }

    /// Expected perceived count before noise and rounding.
    pub fn perceive(&self, n: u64) -> f64 {
        let n = n as f64;
        if n <= self.saturation_start {
            n
        } else {
            self.saturation_start + self.compression * (n - self.saturation_start)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MockError {
    #[error("UnknownScene: {0:?}")]
    UnknownScene(String),
    #[error("RegionOutOfBounds: {region:?} exceeds {width}x{height}")]
    RegionOutOfBounds { region: TileSpec, width: u32, height: u32 },
    #[error("image is not a scene tag: {0}")]
    BadTag(String),
    #[error("query carries no image")]
    NoImage,
}

impl From<MockError> for ClientError {
    fn from(e: MockError) -> Self {
        ClientError::Mock(e.to_string())
    }
}

pub fn mock_count(scene: &SyntheticScene, region: &TileSpec, profile: &MockBehaviorProfile) -> Result<u64, MockError> {
    if !region.fits_in(scene.width, scene.height) {
        return Err(MockError::RegionOutOfBounds {
            region: *region,
            width: scene.width,
            height: scene.height,
        });
    }
    let n = scene.count_in(region);
    let mut perceived = profile.perceive(n);
    if profile.noise_sigma > 0.0 {
        let label = format!("{}|{},{},{},{}", scene.scene_id, region.x, region.y, region.w, region.h);
        let mut rng = seeds::stream(profile.seed, &label, 0);
        let eps = Normal::new(0.0, profile.noise_sigma)
            .expect("finite sigma")
            .sample(&mut rng);
        perceived *= 1.0 + eps;
    }
    Ok(perceived.round().max(0.0) as u64)
}

/// `count` disks with centers uniform over the image.
pub fn generate_scene<R: Rng + ?Sized>(
    scene_id: impl Into<String>,
    category: impl Into<String>,
    count: u64,
    width: u32,
    height: u32,
    radius: f64,
    rng: &mut R,
) -> SyntheticScene {
    let objects = (0..count)
        .map(|_| SceneObject {
            cx: rng.random_range(0.0..width as f64),
            cy: rng.random_range(0.0..height as f64),
            r: radius,
        })
        .collect();
    SyntheticScene {
        scene_id: scene_id.into(),
        width,
        height,
        category: category.into(),
        objects,
    }
}

/// Scene for an annotation record: its points when present, otherwise
/// `count` centers drawn from a stream keyed by the image id.
pub fn scene_from_record(record: &ImageRecord, radius: f64, seed: u64) -> SyntheticScene {
    match &record.points {
        Some(points) => SyntheticScene {
            scene_id: record.image_id.clone(),
            width: record.width,
            height: record.height,
            category: record.category.clone(),
            objects: points
                .iter()
                .map(|[x, y]| SceneObject {
                    cx: x.clamp(0.0, record.width as f64),
                    cy: y.clamp(0.0, record.height as f64),
                    r: radius,
                })
                .collect(),
        },
        None => {
            let mut rng = seeds::stream(seed, &record.image_id, 0);
            generate_scene(
                record.image_id.clone(),
                record.category.clone(),
                record.count,
                record.width,
                record.height,
                radius,
                &mut rng,
            )
        }
    }
}

const TAG_MAGIC: &str = "countforge-scene-tag/1 ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneTag {
    pub scene: String,
    pub region: TileSpec,
}

/// Encodes a tag as a one-row grayscale PNG whose pixel values are the payload bytes.
pub fn encode_tag(tag: &SceneTag) -> EncodedImage {
    let payload = format!("{TAG_MAGIC}{}", serde_json::to_string(tag).expect("tag serializes"));
    let img = GrayImage::from_raw(payload.len() as u32, 1, payload.into_bytes()).expect("buffer matches size");
    let mut bytes = Vec::new();
    DynamicImage::ImageLuma8(img)
        .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("in-memory PNG encode");
    EncodedImage {
        bytes,
        media_type: "image/png".into(),
    }
}

pub fn decode_tag(img: &EncodedImage) -> Result<SceneTag, MockError> {
    let decoded = image::load_from_memory(&img.bytes).map_err(|e| MockError::BadTag(e.to_string()))?;
    let raw = decoded.to_luma8().into_raw();
    let text = std::str::from_utf8(&raw).map_err(|e| MockError::BadTag(e.to_string()))?;
    let body = text.strip_prefix(TAG_MAGIC).ok_or_else(|| MockError::BadTag("missing tag header".into()))?;
    serde_json::from_str(body).map_err(|e| MockError::BadTag(e.to_string()))
}

/// A scene presented through the [`ImageSource`] interface.
#[derive(Debug, Clone)]
pub struct SceneImage {
    pub scene: Arc<SyntheticScene>,
}

impl ImageSource for SceneImage {
    fn dimensions(&self) -> (u32, u32) {
        (self.scene.width, self.scene.height)
    }

    fn encode(&self, tile: &TileSpec) -> Result<EncodedImage, ImageError> {
        if !tile.fits_in(self.scene.width, self.scene.height) {
            return Err(ImageError::TileOutOfBounds {
                tile: *tile,
                width: self.scene.width,
                height: self.scene.height,
            });
        }
        Ok(encode_tag(&SceneTag {
            scene: self.scene.scene_id.clone(),
            region: *tile,
        }))
    }
}

#[derive(Debug, Clone, Default)]
pub struct SceneRegistry {
    scenes: HashMap<String, Arc<SyntheticScene>>,
}

impl SceneRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, scene: SyntheticScene) -> Arc<SyntheticScene> {
        let scene = Arc::new(scene);
        self.scenes.insert(scene.scene_id.clone(), scene.clone());
        scene
    }

    pub fn get(&self, id: &str) -> Option<&Arc<SyntheticScene>> {
        self.scenes.get(id)
    }

    pub fn image(&self, id: &str) -> Option<SceneImage> {
        self.get(id).map(|scene| SceneImage { scene: scene.clone() })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    fn resolve(&self, img: &EncodedImage) -> Result<(&SyntheticScene, TileSpec), MockError> {
        let tag = decode_tag(img)?;
        let scene = self.get(&tag.scene).ok_or(MockError::UnknownScene(tag.scene))?;
        Ok((scene, tag.region))
    }
}

impl FromIterator<SyntheticScene> for SceneRegistry {
    fn from_iter<I: IntoIterator<Item = SyntheticScene>>(iter: I) -> Self {
        let mut reg = SceneRegistry::new();
        for s in iter {
            reg.insert(s);
        }
        reg
    }
}

/// Answers a query against registered scenes.
///
/// Count questions get "a photo of N category"; "more than τ" probes get
/// yes/no; ranking prompts get the true ascending order of the images'
/// regional counts; range-choice prompts get the sub-range holding the
/// perceived count.
pub fn mock_reply(registry: &SceneRegistry, q: &VisionQuery, profile: &MockBehaviorProfile) -> Result<ModelReply, MockError> {
    let first = q.images.first().ok_or(MockError::NoImage)?;
    let text = match templates::classify_prompt(&q.prompt) {
        PromptShape::Ranking => {
            let mut counts = Vec::with_capacity(q.images.len());
            for img in &q.images {
                let (scene, region) = registry.resolve(img)?;
                check_region(scene, &region)?;
                counts.push(scene.count_in(&region));
            }
            let mut slots: Vec<usize> = (1..=counts.len()).collect();
            slots.sort_by_key(|&s| (counts[s - 1], s));
            templates::ranking_answer(&slots)
        }
        PromptShape::MoreThan(tau) => {
            let (scene, region) = registry.resolve(first)?;
            let n = if profile.exact_thresholds {
                check_region(scene, &region)?;
                scene.count_in(&region)
            } else {
                mock_count(scene, &region, profile)?
            };
            if n > tau { "yes" } else { "no" }.to_string()
        }
        PromptShape::RangeChoice(ranges) => {
            let (scene, region) = registry.resolve(first)?;
            let n = mock_count(scene, &region, profile)?;
            nearest_range(&ranges, n).to_string()
        }
        PromptShape::Count | PromptShape::Other => {
            let (scene, region) = registry.resolve(first)?;
            templates::count_answer(mock_count(scene, &region, profile)?, &scene.category)
        }
    };
    Ok(ModelReply {
        raw: json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}),
        text,
        latency_ms: 0.0,
    })
}

fn check_region(scene: &SyntheticScene, region: &TileSpec) -> Result<(), MockError> {
    if region.fits_in(scene.width, scene.height) {
        Ok(())
    } else {
        Err(MockError::RegionOutOfBounds {
            region: *region,
            width: scene.width,
            height: scene.height,
        })
    }
}

fn nearest_range(ranges: &[CountRange], n: u64) -> CountRange {
    ranges
        .iter()
        .copied()
        .find(|r| r.contains(n))
        .unwrap_or_else(|| if n < ranges[0].lower { ranges[0] } else { *ranges.last().unwrap() })
}

/// In-process mock model.
#[derive(Debug, Clone)]
pub struct MockModel {
    pub registry: Arc<SceneRegistry>,
    pub profile: MockBehaviorProfile,
}

impl MockModel {
    pub fn new(registry: SceneRegistry, profile: MockBehaviorProfile) -> Self {
        Self {
            registry: Arc::new(registry),
            profile,
        }
    }
}

impl VisionModel for MockModel {
    fn query(&self, q: &VisionQuery) -> Result<ModelReply, ClientError> {
        Ok(mock_reply(&self.registry, q, &self.profile)?)
    }
}

/// The mock served over HTTP with the chat-completions wire format.
pub struct MockServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves on a background thread.
    pub fn start(model: MockModel, addr: &str) -> std::io::Result<MockServer> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let model = Arc::new(model);
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_io()
            .build()?;
        let thread = std::thread::Builder::new().name("mock-server".into()).spawn(move || {
            runtime.block_on(async move {
                let app = axum::Router::new()
                    .route("/v1/chat/completions", axum::routing::post(handle))
                    .route("/chat/completions", axum::routing::post(handle))
                    .with_state(model);
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener into tokio");
                let served = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
                if let Err(e) = served {
                    log::error!("mock server stopped: {e}");
                }
            });
        })?;
        Ok(MockServer {
            addr: local,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL suitable for [`crate::client::EndpointConfig::base_url`].
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Blocks until the server thread exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

async fn handle(
    axum::extract::State(model): axum::extract::State<Arc<MockModel>>,
    axum::Json(body): axum::Json<Value>,
) -> (axum::http::StatusCode, axum::Json<Value>) {
    use axum::http::StatusCode;
    let reply = crate::client::parse_request_body(&body)
        .map_err(|e| e.to_string())
        .and_then(|q| mock_reply(&model.registry, &q, &model.profile).map_err(|e| e.to_string()));
    match reply {
        Ok(r) => (
            StatusCode::OK,
            axum::Json(json!({
                "object": "chat.completion",
                "model": body.get("model").cloned().unwrap_or(Value::Null),
                "choices": [{"index": 0, "message": {"role": "assistant", "content": r.text}, "finish_reason": "stop"}],
            })),
        ),
        Err(msg) => (
            StatusCode::BAD_REQUEST,
            axum::Json(json!({"error": {"message": msg, "type": "invalid_request_error"}})),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_ops::grid_partition;

    fn scene(objects: Vec<(f64, f64)>, r: f64) -> SyntheticScene {
        SyntheticScene {
            scene_id: "s".into(),
            width: 100,
            height: 100,
            category: "objects".into(),
            objects: objects.into_iter().map(|(cx, cy)| SceneObject { cx, cy, r }).collect(),
        }
    }

    #[test]
    fn midline_object_counted_by_both_tiles() {
        let s = scene(vec![(50.0, 20.0), (10.0, 10.0)], 3.0);
        let p = MockBehaviorProfile::default().noiseless();
        let tiles = grid_partition(100, 100, 2).unwrap();
        let sum: u64 = tiles.iter().map(|t| mock_count(&s, t, &p).unwrap()).sum();
        assert_eq!(sum, s.true_count() + 1);
    }

    #[test]
    fn saturation_formula() {
        let p = MockBehaviorProfile {
            saturation_start: 60.0,
            compression: 0.5,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let mut rng = seeds::stream(0, "t", 0);
        let s10 = generate_scene("a", "objects", 10, 1000, 1000, 5.0, &mut rng);
        assert_eq!(mock_count(&s10, &TileSpec::full(1000, 1000), &p).unwrap(), 10);
        let s200 = generate_scene("b", "objects", 200, 1000, 1000, 5.0, &mut rng);
        assert_eq!(mock_count(&s200, &TileSpec::full(1000, 1000), &p).unwrap(), 130);
    }

    #[test]
    fn scene_generation() {
        let mut rng = seeds::stream(5, "g", 0);
        assert!(generate_scene("e", "x", 0, 10, 10, 1.0, &mut rng).objects.is_empty());
        let big = generate_scene("b", "x", 500, 1000, 1000, 1.0, &mut rng);
        assert_eq!(big.true_count(), 500);
        assert!(big.objects.iter().all(|o| o.cx >= 0.0 && o.cx < 1000.0 && o.cy >= 0.0 && o.cy < 1000.0));
        let a = generate_scene("b", "x", 50, 640, 480, 2.0, &mut seeds::stream(1, "s", 0));
        let b = generate_scene("b", "x", 50, 640, 480, 2.0, &mut seeds::stream(1, "s", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn region_bounds_checked() {
        let s = scene(vec![], 1.0);
        let out = TileSpec { x: 90, y: 0, w: 20, h: 10, row: 0, col: 0 };
        assert!(matches!(
            mock_count(&s, &out, &MockBehaviorProfile::default()),
            Err(MockError::RegionOutOfBounds { .. })
        ));
    }

    #[test]
    fn noise_is_deterministic() {
        let mut rng = seeds::stream(2, "n", 0);
        let s = generate_scene("n", "x", 300, 1000, 1000, 10.0, &mut rng);
        let p = MockBehaviorProfile::default();
        let full = TileSpec::full(1000, 1000);
        let a = mock_count(&s, &full, &p).unwrap();
        assert_eq!(a, mock_count(&s, &full, &p).unwrap());
        let other = MockBehaviorProfile { seed: 99, ..p.clone() };
        let spread: std::collections::HashSet<u64> =
            (0..20).map(|k| mock_count(&s, &full, &MockBehaviorProfile { seed: k, ..other.clone() }).unwrap()).collect();
        assert!(spread.len() > 1);
    }

    #[test]
    fn tags_round_trip() {
        let tag = SceneTag {
            scene: "img_7".into(),
            region: TileSpec { x: 3, y: 4, w: 5, h: 6, row: 1, col: 0 },
        };
        assert_eq!(decode_tag(&encode_tag(&tag)).unwrap(), tag);
        let junk = EncodedImage { bytes: vec![0, 1, 2], media_type: "image/png".into() };
        assert!(matches!(decode_tag(&junk), Err(MockError::BadTag(_))));
    }

    fn registry_with(counts: &[u64]) -> SceneRegistry {
        counts
            .iter()
            .enumerate()
            .map(|(i, c)| generate_scene(format!("s{i}"), "objects", *c, 500, 500, 2.0, &mut seeds::stream(4, "r", i as u64)))
            .collect()
    }

    fn full_tag(reg: &SceneRegistry, id: &str) -> EncodedImage {
        let img = reg.image(id).unwrap();
        img.encode(&TileSpec::full(500, 500)).unwrap()
    }

    #[test]
    fn replies_by_prompt_shape() {
        let reg = registry_with(&[10, 24]);
        let p = MockBehaviorProfile::default().noiseless();
        let q = VisionQuery::new(vec![full_tag(&reg, "s0")], templates::count_question("objects"));
        assert_eq!(mock_reply(&reg, &q, &p).unwrap().text, "a photo of 10 objects");

        let exact = MockBehaviorProfile { exact_thresholds: true, ..p.clone() };
        let probe = |tau: u64| VisionQuery::new(vec![full_tag(&reg, "s1")], format!("Are there more than {tau} objects in the image?"));
        assert_eq!(mock_reply(&reg, &probe(16), &exact).unwrap().text, "yes");
        assert_eq!(mock_reply(&reg, &probe(24), &exact).unwrap().text, "no");

        let unknown = SceneImage {
            scene: Arc::new(scene(vec![], 1.0)),
        };
        let q = VisionQuery::new(vec![unknown.encode(&TileSpec::full(100, 100)).unwrap()], "How many objects are there in the image?");
        assert!(matches!(mock_reply(&reg, &q, &p), Err(MockError::UnknownScene(_))));
    }

    #[test]
    fn perfect_ranker() {
        let reg = registry_with(&[190, 8, 57]);
        let imgs = vec![full_tag(&reg, "s0"), full_tag(&reg, "s1"), full_tag(&reg, "s2")];
        let q = VisionQuery::new(imgs, "Given three images, rank them in ascending order based on their counts of objects");
        let r = mock_reply(&reg, &q, &MockBehaviorProfile::default()).unwrap();
        assert_eq!(r.text, "Image 2 < Image 3 < Image 1");
    }

    #[test]
    fn record_scenes_use_points() {
        let rec = ImageRecord {
            image_id: "p".into(),
            image_path: "p.png".into(),
            category: "cells".into(),
            count: 2,
            points: Some(vec![[1.0, 2.0], [30.0, 40.0]]),
            width: 64,
            height: 64,
        };
        let s = scene_from_record(&rec, 3.0, 0);
        assert_eq!(s.objects[1], SceneObject { cx: 30.0, cy: 40.0, r: 3.0 });
        let no_points = ImageRecord { points: None, count: 9, ..rec };
        assert_eq!(scene_from_record(&no_points, 3.0, 0).true_count(), 9);
        assert_eq!(scene_from_record(&no_points, 3.0, 0), scene_from_record(&no_points, 3.0, 0));
    }
}
