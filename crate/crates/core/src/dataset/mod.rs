//! Attribute-labelled images: the synthetic glyph generator and loaders for
//! external data.

mod external;
mod glyph;
mod image;

pub use self::external::{export_glyphs, load_external, load_glyph_export, ExternalData, LABELS_FILE};
pub use self::glyph::{make_glyph_dataset, GlyphDataset, GlyphSpec, ATTRIBUTE_LEVELS, MAX_PAIRWISE_COSINE};
pub use self::image::{mean_image, ImageTensor, SKBI_MAGIC};

use crate::skb::ClassIndex;

/// An image with its class and that class's attribute vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: ImageTensor,
    pub class: ClassIndex,
    pub attributes: Vec<f64>,
}
