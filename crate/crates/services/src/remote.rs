//! Segmentation over HTTP: `POST {endpoint}/segment` with the image as PNG,
//! answered by a PNG mask of the same size.

use std::time::Duration;

use eyas_core::codec;
use eyas_core::model::{FundusImage, RoiBox};
use eyas_core::segmenter::{BackendDescriptor, BackendKind, Segmentation, SegmentationBackend};
use eyas_core::{Error, Result};

pub const REMOTE_TIMEOUT: Duration = Duration::from_secs(60);

pub struct RemoteBackend {
    desc: BackendDescriptor,
    url: String,
}

impl RemoteBackend {
    pub fn new(desc: BackendDescriptor) -> Result<Self> {
        desc.validate()?;
        let endpoint = match (desc.kind, &desc.endpoint) {
            (BackendKind::Remote, Some(e)) => e.trim_end_matches('/').to_string(),
            _ => return Err(Error::InvalidBackend(format!("{} is not a remote backend", desc.id()))),
        };
        Ok(Self {
            url: format!("{endpoint}/segment"),
            desc,
        })
    }
}

impl SegmentationBackend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    /// Blocking; must not run on an async executor thread.
    fn segment(&self, img: &FundusImage, _roi: Option<&RoiBox>) -> Result<Segmentation> {
        let fail = |m: String| Error::BackendFailure(format!("{}: {m}", self.desc.id()));
        let client = reqwest::blocking::Client::builder()
            .timeout(REMOTE_TIMEOUT)
            .build()
            .map_err(|e| fail(e.to_string()))?;
        let resp = client
            .post(&self.url)
            .header("Content-Type", "image/png")
            .header("X-Structure", self.desc.structure.as_str())
            .header("X-Image-Id", img.image_id())
            .body(codec::encode_rgb_png(img)?)
            .send()
            .map_err(|e| fail(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() != 200 {
            return Err(fail(format!("status {}", status.as_u16())));
        }
        let bytes = resp.bytes().map_err(|e| fail(e.to_string()))?;
        let mask = codec::decode_mask_png(&bytes).map_err(|e| fail(e.to_string()))?;
        if mask.dims() != (img.width(), img.height()) {
            return Err(fail(format!(
                "mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                img.width(),
                img.height()
            )));
        }
        Ok(Segmentation::Region(mask))
    }
}
