//! Backend traits and the name-keyed registry.
//!
//! Every replaceable model in the pipeline sits behind a trait: the frozen
//! dual encoder, the three generation backends, the two content filters,
//! and the object-mask proposer. Implementations register under a name and
//! are selected at runtime from config keys (`encoder.backend`,
//! `cmgen.inpainter`, `filters.text_filter`, `seg.mask_proposer`, ...).

pub mod encoder;
pub mod filters;
pub mod generation;
pub mod masks;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use encoder::{
    DualEncoder, EmbeddingBundle, EncoderConfig, EncoderShapes, MockEncoder, ReferenceEncoder,
    MOCK_SHAPES, REFERENCE_SHAPES,
};
pub use filters::{FiltersConfig, ImageFilter, LexiconTextFilter, PixelStatImageFilter, TextFilter};
pub use generation::{
    Captioner, CmgenConfig, Inpainter, ProceduralTextToImage, RingMeanInpainter, TemplateCaptioner,
    TextToImage,
};
pub use masks::{LuminanceComponents, MaskProposer};

use crate::config::SegSection;

type EncoderFactory = Box<dyn Fn(&EncoderConfig) -> Result<Arc<dyn DualEncoder>> + Send + Sync>;
type InpainterFactory = Box<dyn Fn(&CmgenConfig) -> Result<Arc<dyn Inpainter>> + Send + Sync>;
type CaptionerFactory = Box<dyn Fn(&CmgenConfig) -> Result<Arc<dyn Captioner>> + Send + Sync>;
type TextToImageFactory = Box<dyn Fn(&CmgenConfig) -> Result<Arc<dyn TextToImage>> + Send + Sync>;
type TextFilterFactory = Box<dyn Fn(&FiltersConfig) -> Result<Arc<dyn TextFilter>> + Send + Sync>;
type ImageFilterFactory = Box<dyn Fn(&FiltersConfig) -> Result<Arc<dyn ImageFilter>> + Send + Sync>;
type MaskProposerFactory = Box<dyn Fn(&SegSection) -> Result<Arc<dyn MaskProposer>> + Send + Sync>;

/// Name-keyed factories for every backend kind.
pub struct BackendRegistry {
    encoders: BTreeMap<String, EncoderFactory>,
    inpainters: BTreeMap<String, InpainterFactory>,
    captioners: BTreeMap<String, CaptionerFactory>,
    text_to_image: BTreeMap<String, TextToImageFactory>,
    text_filters: BTreeMap<String, TextFilterFactory>,
    image_filters: BTreeMap<String, ImageFilterFactory>,
    mask_proposers: BTreeMap<String, MaskProposerFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        BackendRegistry {
            encoders: BTreeMap::new(),
            inpainters: BTreeMap::new(),
            captioners: BTreeMap::new(),
            text_to_image: BTreeMap::new(),
            text_filters: BTreeMap::new(),
            image_filters: BTreeMap::new(),
            mask_proposers: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register_encoder("mock", |cfg| Ok(Arc::new(MockEncoder::new(cfg.mock_seed))));
        reg.register_encoder("reference", |_| Ok(Arc::new(ReferenceEncoder::new())));
        reg.register_inpainter("mock", |_| Ok(Arc::new(RingMeanInpainter)));
        reg.register_captioner("mock", |_| Ok(Arc::new(TemplateCaptioner)));
        reg.register_text_to_image("mock", |cfg| {
            Ok(Arc::new(ProceduralTextToImage { size: cfg.t2i_size }))
        });
        reg.register_text_filter("lexicon", |cfg| {
            Ok(Arc::new(LexiconTextFilter::new(&cfg.lexicon)))
        });
        reg.register_image_filter("pixel-stat", |cfg| {
            Ok(Arc::new(PixelStatImageFilter::new(cfg.nsfw_threshold)))
        });
        reg.register_mask_proposer("luminance-cc", |cfg| {
            Ok(Arc::new(LuminanceComponents {
                threshold: cfg.luminance_threshold,
                min_pixels: cfg.min_object_pixels,
            }))
        });
        reg
    }

    pub fn register_encoder<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&EncoderConfig) -> Result<Arc<dyn DualEncoder>> + Send + Sync + 'static,
    {
        self.encoders.insert(name.to_string(), Box::new(f));
    }

    pub fn register_inpainter<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&CmgenConfig) -> Result<Arc<dyn Inpainter>> + Send + Sync + 'static,
    {
        self.inpainters.insert(name.to_string(), Box::new(f));
    }

    pub fn register_captioner<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&CmgenConfig) -> Result<Arc<dyn Captioner>> + Send + Sync + 'static,
    {
        self.captioners.insert(name.to_string(), Box::new(f));
    }

    pub fn register_text_to_image<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&CmgenConfig) -> Result<Arc<dyn TextToImage>> + Send + Sync + 'static,
    {
        self.text_to_image.insert(name.to_string(), Box::new(f));
    }

    pub fn register_text_filter<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&FiltersConfig) -> Result<Arc<dyn TextFilter>> + Send + Sync + 'static,
    {
        self.text_filters.insert(name.to_string(), Box::new(f));
    }

    pub fn register_image_filter<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&FiltersConfig) -> Result<Arc<dyn ImageFilter>> + Send + Sync + 'static,
    {
        self.image_filters.insert(name.to_string(), Box::new(f));
    }

    pub fn register_mask_proposer<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&SegSection) -> Result<Arc<dyn MaskProposer>> + Send + Sync + 'static,
    {
        self.mask_proposers.insert(name.to_string(), Box::new(f));
    }

    pub fn encoder(&self, cfg: &EncoderConfig) -> Result<Arc<dyn DualEncoder>> {
        Self::create("encoder", &self.encoders, &cfg.backend, cfg)
    }

    pub fn inpainter(&self, cfg: &CmgenConfig) -> Result<Arc<dyn Inpainter>> {
        Self::create("inpainter", &self.inpainters, &cfg.inpainter, cfg)
    }

    pub fn captioner(&self, cfg: &CmgenConfig) -> Result<Arc<dyn Captioner>> {
        Self::create("captioner", &self.captioners, &cfg.captioner, cfg)
    }

    pub fn text_to_image(&self, cfg: &CmgenConfig) -> Result<Arc<dyn TextToImage>> {
        Self::create("text_to_image", &self.text_to_image, &cfg.text_to_image, cfg)
    }

    pub fn text_filter(&self, cfg: &FiltersConfig) -> Result<Arc<dyn TextFilter>> {
        Self::create("text_filter", &self.text_filters, &cfg.text_filter, cfg)
    }

    pub fn image_filter(&self, cfg: &FiltersConfig) -> Result<Arc<dyn ImageFilter>> {
        Self::create("image_filter", &self.image_filters, &cfg.image_filter, cfg)
    }

    pub fn mask_proposer(&self, cfg: &SegSection) -> Result<Arc<dyn MaskProposer>> {
        Self::create("mask_proposer", &self.mask_proposers, &cfg.mask_proposer, cfg)
    }

    fn create<C, T: ?Sized>(
        kind: &'static str,
        map: &BTreeMap<String, Box<dyn Fn(&C) -> Result<Arc<T>> + Send + Sync>>,
        name: &str,
        cfg: &C,
    ) -> Result<Arc<T>> {
        match map.get(name) {
            Some(factory) => factory(cfg),
            None => Err(Error::UnknownBackend {
                kind,
                name: name.to_string(),
                known: map.keys().cloned().collect::<Vec<_>>().join(", "),
            }),
        }
    }
}
