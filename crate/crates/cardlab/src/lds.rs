//! The card's logical data structure: the machine readable zone with its
//! check digits, numbered data groups, the EF.COM manifest and the
//! signed EF.SOD security object, plus the access-key seed derived from
//! the MRZ.

use std::collections::BTreeMap;

use base64::Engine;
use thiserror::Error;

use crate::codec::{tlv_decode, tlv_encode, TlvNode};
use crate::cryptokit::{sha1, sha256, sign, verify, EcKeyPair};
use crate::pki::{verify_chain, SimpleCert, TrustStore};

pub const EF_COM_FID: u16 = 0x011E;
pub const EF_SOD_FID: u16 = 0x011D;

/// Lab extension: elementary file holding the card's signing certificate
/// for the eSign flows.
pub const EF_SIGN_CERT_FID: u16 = 0x011C;

pub fn dg_fid(number: u8) -> u16 {
    0x0100 + u16::from(number)
}

/// LDS template tag for each data group file.
pub fn dg_tag(number: u8) -> u8 {
    match number {
        1 => 0x61,
        2 => 0x75,
        3 => 0x63,
        4 => 0x76,
        5 => 0x65,
        6 => 0x66,
        7 => 0x67,
        8 => 0x68,
        9 => 0x69,
        10 => 0x6A,
        11 => 0x6B,
        12 => 0x6C,
        13 => 0x6D,
        14 => 0x6E,
        15 => 0x6F,
        16 => 0x70,
        _ => panic!("data group number out of range: {number}"),
    }
}

pub fn dg_number_for_tag(tag: u8) -> Option<u8> {
    (1..=16).find(|&n| dg_tag(n) == tag)
}

const TAG_MRZ_DATA: u16 = 0x5F1F;
const TAG_BIOMETRIC: u16 = 0x5F2E;
const TAG_CHIP_KEY: u16 = 0x86;
const TAG_LDS_VERSION: u16 = 0x5F01;
const TAG_UNICODE_VERSION: u16 = 0x5F36;
const TAG_TAG_LIST: u16 = 0x5C;
const TAG_HASH_ALG: u16 = 0x80;
const TAG_HASH_ENTRY: u16 = 0x30;
const TAG_DG_NUMBER: u16 = 0x02;
const TAG_HASH_VALUE: u16 = 0x04;
const TAG_SOD_SIGNATURE: u16 = 0x5F37;

const HASH_ALG_SHA256: u8 = 0x01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LdsError {
    #[error("character {0:?} not in the MRZ charset [A-Z0-9<]")]
    Charset(char),
    #[error("field {field} longer than {max} characters")]
    FieldTooLong { field: &'static str, max: usize },
    #[error("check digit mismatch in {0}")]
    CheckDigit(&'static str),
    #[error("MRZ must be three lines of thirty characters")]
    BadShape,
    #[error("profile: {0}")]
    Profile(String),
    #[error("file structure: {0}")]
    BadStructure(&'static str),
}

/// Weighted 7-3-1 check digit over the MRZ charset: '<' counts zero,
/// digits count themselves, letters count 10 through 35.
pub fn compute_check_digit(field: &str) -> Result<u8, LdsError> {
    const WEIGHTS: [u32; 3] = [7, 3, 1];
    let mut sum = 0u32;
    for (i, ch) in field.chars().enumerate() {
        let value = match ch {
            '<' => 0,
            '0'..='9' => ch as u32 - '0' as u32,
            'A'..='Z' => ch as u32 - 'A' as u32 + 10,
            other => return Err(LdsError::Charset(other)),
        };
        sum += value * WEIGHTS[i % 3];
    }
    Ok((sum % 10) as u8)
}

fn pad_field(value: &str, width: usize, field: &'static str) -> Result<String, LdsError> {
    if value.len() > width {
        return Err(LdsError::FieldTooLong { field, max: width });
    }
    for ch in value.chars() {
        if !matches!(ch, 'A'..='Z' | '0'..='9' | '<') {
            return Err(LdsError::Charset(ch));
        }
    }
    let mut out = value.to_string();
    while out.len() < width {
        out.push('<');
    }
    Ok(out)
}

/// Input fields for a three-line identity-card MRZ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MrzFields {
    pub document_code: String,
    pub issuing_state: String,
    pub document_number: String,
    pub optional_data: String,
    pub date_of_birth: String,
    pub sex: char,
    pub date_of_expiry: String,
    pub nationality: String,
    pub optional_data2: String,
    pub name: String,
}

/// A validated MRZ: three 30-character lines whose four check digits all
/// verify, plus the parsed fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mrz {
    fields: MrzFields,
    lines: [String; 3],
}

impl Mrz {
    pub fn build(fields: &MrzFields) -> Result<Mrz, LdsError> {
        let doc_code = pad_field(&fields.document_code, 2, "document code")?;
        let state = pad_field(&fields.issuing_state, 3, "issuing state")?;
        let doc_num = pad_field(&fields.document_number, 9, "document number")?;
        let opt1 = pad_field(&fields.optional_data, 15, "optional data")?;
        let digits6 = |value: &str, what: &str| -> Result<String, LdsError> {
            if value.len() != 6 || !value.chars().all(|c| c.is_ascii_digit()) {
                return Err(LdsError::Profile(format!("{what} must be six digits (YYMMDD)")));
            }
            Ok(value.to_string())
        };
        let dob = digits6(&fields.date_of_birth, "date of birth")?;
        let sex = match fields.sex {
            'M' | 'F' | '<' => fields.sex,
            other => return Err(LdsError::Charset(other)),
        };
        let expiry = digits6(&fields.date_of_expiry, "date of expiry")?;
        let nationality = pad_field(&fields.nationality, 3, "nationality")?;
        let opt2 = pad_field(&fields.optional_data2, 11, "optional data 2")?;
        let name = pad_field(&fields.name, 30, "name")?;

        let cd_doc = compute_check_digit(&doc_num)?;
        let cd_dob = compute_check_digit(&dob)?;
        let cd_exp = compute_check_digit(&expiry)?;

        let line1 = format!("{doc_code}{state}{doc_num}{cd_doc}{opt1}");
        let composite_input =
            format!("{doc_num}{cd_doc}{opt1}{dob}{cd_dob}{expiry}{cd_exp}{opt2}");
        let cd_comp = compute_check_digit(&composite_input)?;
        let line2 = format!("{dob}{cd_dob}{sex}{expiry}{cd_exp}{nationality}{opt2}{cd_comp}");
        let line3 = name.clone();

        debug_assert_eq!(line1.len(), 30);
        debug_assert_eq!(line2.len(), 30);

        Ok(Mrz {
            fields: MrzFields {
                document_code: doc_code,
                issuing_state: state,
                document_number: doc_num,
                optional_data: opt1,
                date_of_birth: dob,
                sex,
                date_of_expiry: expiry,
                nationality,
                optional_data2: opt2,
                name,
            },
            lines: [line1, line2, line3],
        })
    }

    /// Parse and validate three 30-character lines. Every failing check
    /// digit is reported by the field it protects.
    pub fn parse(lines: &[&str]) -> Result<Mrz, LdsError> {
        if lines.len() != 3 || lines.iter().any(|l| l.len() != 30) {
            return Err(LdsError::BadShape);
        }
        for line in lines {
            for ch in line.chars() {
                if !matches!(ch, 'A'..='Z' | '0'..='9' | '<') {
                    return Err(LdsError::Charset(ch));
                }
            }
        }
        let l1 = lines[0];
        let l2 = lines[1];
        let doc_num = &l1[5..14];
        let cd_doc: u8 = l1[14..15].parse().map_err(|_| LdsError::CheckDigit("document number"))?;
        if compute_check_digit(doc_num)? != cd_doc {
            return Err(LdsError::CheckDigit("document number"));
        }
        let dob = &l2[0..6];
        let cd_dob: u8 = l2[6..7].parse().map_err(|_| LdsError::CheckDigit("date of birth"))?;
        if compute_check_digit(dob)? != cd_dob {
            return Err(LdsError::CheckDigit("date of birth"));
        }
        let expiry = &l2[8..14];
        let cd_exp: u8 = l2[14..15].parse().map_err(|_| LdsError::CheckDigit("date of expiry"))?;
        if compute_check_digit(expiry)? != cd_exp {
            return Err(LdsError::CheckDigit("date of expiry"));
        }
        let composite_input = format!("{}{}{}", &l1[5..30], &l2[0..7], &l2[8..15]);
        let composite_input = format!("{composite_input}{}", &l2[18..29]);
        let cd_comp: u8 = l2[29..30].parse().map_err(|_| LdsError::CheckDigit("composite"))?;
        if compute_check_digit(&composite_input)? != cd_comp {
            return Err(LdsError::CheckDigit("composite"));
        }
        let sex = l2.chars().nth(7).unwrap();
        if !matches!(sex, 'M' | 'F' | '<') {
            return Err(LdsError::Charset(sex));
        }
        Ok(Mrz {
            fields: MrzFields {
                document_code: l1[0..2].to_string(),
                issuing_state: l1[2..5].to_string(),
                document_number: doc_num.to_string(),
                optional_data: l1[15..30].to_string(),
                date_of_birth: dob.to_string(),
                sex,
                date_of_expiry: expiry.to_string(),
                nationality: l2[15..18].to_string(),
                optional_data2: l2[18..29].to_string(),
                name: lines[2].to_string(),
            },
            lines: [l1.to_string(), l2.to_string(), lines[2].to_string()],
        })
    }

    pub fn fields(&self) -> &MrzFields {
        &self.fields
    }

    pub fn lines(&self) -> [&str; 3] {
        [&self.lines[0], &self.lines[1], &self.lines[2]]
    }

    /// The 90-character concatenation stored in DG1.
    pub fn text(&self) -> String {
        self.lines.concat()
    }

    /// Document number, date of birth and date of expiry, each followed
    /// by its check digit: the key material the access protocol hashes.
    pub fn mrz_info(&self) -> String {
        let cd_doc = compute_check_digit(&self.fields.document_number).unwrap();
        let cd_dob = compute_check_digit(&self.fields.date_of_birth).unwrap();
        let cd_exp = compute_check_digit(&self.fields.date_of_expiry).unwrap();
        format!(
            "{}{}{}{}{}{}",
            self.fields.document_number,
            cd_doc,
            self.fields.date_of_birth,
            cd_dob,
            self.fields.date_of_expiry,
            cd_exp
        )
    }

    /// First sixteen bytes of the SHA-1 of the MRZ key information.
    pub fn bac_seed(&self) -> [u8; 16] {
        let digest = sha1(self.mrz_info().as_bytes());
        digest[..16].try_into().unwrap()
    }
}

/// Assemble the access-key seed directly from the three key fields, as a
/// terminal does when the operator types them in.
pub fn bac_seed_from_parts(
    document_number: &str,
    date_of_birth: &str,
    date_of_expiry: &str,
) -> Result<[u8; 16], LdsError> {
    let doc = pad_field(document_number, 9, "document number")?;
    let info = format!(
        "{}{}{}{}{}{}",
        doc,
        compute_check_digit(&doc)?,
        date_of_birth,
        compute_check_digit(date_of_birth)?,
        date_of_expiry,
        compute_check_digit(date_of_expiry)?
    );
    Ok(sha1(info.as_bytes())[..16].try_into().unwrap())
}

/// Chip protocol public keys embedded into DG14/DG15 at build time.
#[derive(Debug, Clone)]
pub struct ChipKeys {
    pub chip_auth_public: Vec<u8>,
    pub active_auth_public: Vec<u8>,
}

/// EF.COM: format versions plus the manifest of present data groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EfCom {
    pub lds_version: String,
    pub unicode_version: String,
    pub dg_tags: Vec<u8>,
}

impl EfCom {
    pub fn encode(&self) -> Vec<u8> {
        let node = TlvNode::constructed(
            0x60,
            vec![
                TlvNode::primitive(TAG_LDS_VERSION, self.lds_version.as_bytes()).unwrap(),
                TlvNode::primitive(TAG_UNICODE_VERSION, self.unicode_version.as_bytes()).unwrap(),
                TlvNode::primitive(TAG_TAG_LIST, self.dg_tags.clone()).unwrap(),
            ],
        )
        .unwrap();
        tlv_encode(&node).unwrap()
    }

    pub fn decode(bytes: &[u8]) -> Result<EfCom, LdsError> {
        let (node, _) = tlv_decode(bytes).map_err(|_| LdsError::BadStructure("EF.COM TLV"))?;
        if node.tag() != 0x60 {
            return Err(LdsError::BadStructure("EF.COM tag"));
        }
        let text = |tag| -> Result<String, LdsError> {
            let v = node.find_value(tag).ok_or(LdsError::BadStructure("EF.COM field"))?;
            String::from_utf8(v.to_vec()).map_err(|_| LdsError::BadStructure("EF.COM text"))
        };
        Ok(EfCom {
            lds_version: text(TAG_LDS_VERSION)?,
            unicode_version: text(TAG_UNICODE_VERSION)?,
            dg_tags: node
                .find_value(TAG_TAG_LIST)
                .ok_or(LdsError::BadStructure("EF.COM tag list"))?
                .to_vec(),
        })
    }
}

/// EF.SOD: per-data-group hashes, the document signer certificate, and
/// the signer's signature over the encoded hash table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EfSod {
    pub hash_alg: u8,
    pub hashes: BTreeMap<u8, [u8; 32]>,
    pub ds_cert: SimpleCert,
    pub signature: Vec<u8>,
}

impl EfSod {
    /// The byte string the document signer signs: the encoded hash
    /// algorithm object followed by every hash entry in order.
    fn signed_payload(hash_alg: u8, hashes: &BTreeMap<u8, [u8; 32]>) -> Vec<u8> {
        let mut out = tlv_encode(&TlvNode::primitive(TAG_HASH_ALG, [hash_alg]).unwrap()).unwrap();
        for (dg, hash) in hashes {
            let entry = TlvNode::constructed(
                TAG_HASH_ENTRY,
                vec![
                    TlvNode::primitive(TAG_DG_NUMBER, [*dg]).unwrap(),
                    TlvNode::primitive(TAG_HASH_VALUE, hash.to_vec()).unwrap(),
                ],
            )
            .unwrap();
            out.extend(tlv_encode(&entry).unwrap());
        }
        out
    }

    pub fn build(
        hashes: BTreeMap<u8, [u8; 32]>,
        ds_cert: SimpleCert,
        ds_key: &EcKeyPair,
    ) -> EfSod {
        let payload = EfSod::signed_payload(HASH_ALG_SHA256, &hashes);
        let signature = sign(ds_key, &payload).to_vec();
        EfSod { hash_alg: HASH_ALG_SHA256, hashes, ds_cert, signature }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut children = vec![TlvNode::primitive(TAG_HASH_ALG, [self.hash_alg]).unwrap()];
        for (dg, hash) in &self.hashes {
            children.push(
                TlvNode::constructed(
                    TAG_HASH_ENTRY,
                    vec![
                        TlvNode::primitive(TAG_DG_NUMBER, [*dg]).unwrap(),
                        TlvNode::primitive(TAG_HASH_VALUE, hash.to_vec()).unwrap(),
                    ],
                )
                .unwrap(),
            );
        }
        children.push(self.ds_cert.to_node());
        children.push(TlvNode::primitive(TAG_SOD_SIGNATURE, self.signature.clone()).unwrap());
        tlv_encode(&TlvNode::constructed(0x77, children).unwrap()).unwrap()
    }

    pub fn decode(bytes: &[u8]) -> Result<EfSod, LdsError> {
        let (node, _) = tlv_decode(bytes).map_err(|_| LdsError::BadStructure("EF.SOD TLV"))?;
        if node.tag() != 0x77 {
            return Err(LdsError::BadStructure("EF.SOD tag"));
        }
        let hash_alg = node
            .find_value(TAG_HASH_ALG)
            .and_then(|v| v.first().copied())
            .ok_or(LdsError::BadStructure("EF.SOD hash algorithm"))?;
        let mut hashes = BTreeMap::new();
        for child in node.children().unwrap_or(&[]) {
            if child.tag() != TAG_HASH_ENTRY {
                continue;
            }
            let dg = child
                .find_value(TAG_DG_NUMBER)
                .and_then(|v| v.first().copied())
                .ok_or(LdsError::BadStructure("hash entry number"))?;
            let hash: [u8; 32] = child
                .find_value(TAG_HASH_VALUE)
                .ok_or(LdsError::BadStructure("hash entry value"))?
                .try_into()
                .map_err(|_| LdsError::BadStructure("hash width"))?;
            hashes.insert(dg, hash);
        }
        let cert_node = node.find(0x7F21).ok_or(LdsError::BadStructure("EF.SOD certificate"))?;
        let ds_cert =
            SimpleCert::from_node(cert_node).map_err(|_| LdsError::BadStructure("EF.SOD certificate"))?;
        let signature = node
            .find_value(TAG_SOD_SIGNATURE)
            .ok_or(LdsError::BadStructure("EF.SOD signature"))?
            .to_vec();
        Ok(EfSod { hash_alg, hashes, ds_cert, signature })
    }

    pub fn signature_verifies(&self) -> bool {
        let payload = EfSod::signed_payload(self.hash_alg, &self.hashes);
        verify(&self.ds_cert.public_key, &payload, &self.signature)
    }
}

/// Per-data-group outcome of passive authentication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaReport {
    pub dg_hash_ok: BTreeMap<u8, bool>,
    pub signature_ok: bool,
    pub chain_ok: bool,
    pub chain_detail: String,
}

impl PaReport {
    pub fn all_pass(&self) -> bool {
        self.signature_ok && self.chain_ok && self.dg_hash_ok.values().all(|&ok| ok)
    }

    pub fn hashes_ok(&self) -> bool {
        self.dg_hash_ok.values().all(|&ok| ok)
    }
}

/// The complete on-card data image: MRZ, encoded data group files,
/// manifest and security object.
#[derive(Debug, Clone)]
pub struct LdsImage {
    pub mrz: Mrz,
    pub data_groups: BTreeMap<u8, Vec<u8>>,
    pub ef_com: EfCom,
    pub ef_sod: EfSod,
}

fn wrap_dg(number: u8, inner: TlvNode) -> Vec<u8> {
    let tag = u16::from(dg_tag(number));
    let node = if crate::codec::tag_is_constructed(tag) {
        TlvNode::constructed(tag, vec![inner]).unwrap()
    } else {
        // All LDS template tags used here are constructed; this arm is
        // unreachable for valid group numbers.
        unreachable!("data group templates are constructed")
    };
    tlv_encode(&node).unwrap()
}

/// Build a consistent image: DG1 from the MRZ, biometrics placeholders
/// from the profile, DG14/DG15 from the chip keys when present, EF.COM
/// listing exactly the built groups, and EF.SOD signed by the document
/// signer over their SHA-256 hashes.
pub fn build_lds(
    profile: &Profile,
    ds_cert: &SimpleCert,
    ds_key: &EcKeyPair,
    chip_keys: Option<&ChipKeys>,
) -> Result<LdsImage, LdsError> {
    let mrz = Mrz::build(&profile.mrz_fields())?;

    let mut data_groups = BTreeMap::new();
    let dg1 = TlvNode::primitive(TAG_MRZ_DATA, mrz.text().as_bytes()).unwrap();
    data_groups.insert(1u8, wrap_dg(1, dg1));

    let dg2 = TlvNode::primitive(TAG_BIOMETRIC, profile.face.clone()).unwrap();
    data_groups.insert(2, wrap_dg(2, dg2));

    if let Some(fingerprint) = &profile.fingerprint {
        let dg3 = TlvNode::primitive(TAG_BIOMETRIC, fingerprint.clone()).unwrap();
        data_groups.insert(3, wrap_dg(3, dg3));
    }

    if let Some(keys) = chip_keys {
        let dg14 = TlvNode::primitive(TAG_CHIP_KEY, keys.chip_auth_public.clone()).unwrap();
        data_groups.insert(14, wrap_dg(14, dg14));
        let dg15 = TlvNode::primitive(TAG_CHIP_KEY, keys.active_auth_public.clone()).unwrap();
        data_groups.insert(15, wrap_dg(15, dg15));
    }

    let ef_com = EfCom {
        lds_version: "0107".into(),
        unicode_version: "040000".into(),
        dg_tags: data_groups.keys().map(|&n| dg_tag(n)).collect(),
    };

    let hashes = data_groups.iter().map(|(&n, bytes)| (n, sha256(bytes))).collect();
    let ef_sod = EfSod::build(hashes, ds_cert.clone(), ds_key);

    Ok(LdsImage { mrz, data_groups, ef_com, ef_sod })
}

/// Reassemble an image from raw elementary-file bytes, as read over the
/// wire by an inspection system.
pub fn lds_from_ef_bytes(
    ef_com_bytes: &[u8],
    ef_sod_bytes: &[u8],
    data_groups: BTreeMap<u8, Vec<u8>>,
) -> Result<LdsImage, LdsError> {
    let ef_com = EfCom::decode(ef_com_bytes)?;
    let ef_sod = EfSod::decode(ef_sod_bytes)?;
    let dg1 = data_groups.get(&1).ok_or(LdsError::BadStructure("DG1 missing"))?;
    let mrz = parse_dg1(dg1)?;
    Ok(LdsImage { mrz, data_groups, ef_com, ef_sod })
}

pub fn parse_dg1(bytes: &[u8]) -> Result<Mrz, LdsError> {
    let (node, _) = tlv_decode(bytes).map_err(|_| LdsError::BadStructure("DG1 TLV"))?;
    let mrz_bytes = node.find_value(TAG_MRZ_DATA).ok_or(LdsError::BadStructure("DG1 MRZ"))?;
    let text = std::str::from_utf8(mrz_bytes).map_err(|_| LdsError::BadStructure("DG1 charset"))?;
    if text.len() != 90 {
        return Err(LdsError::BadShape);
    }
    Mrz::parse(&[&text[0..30], &text[30..60], &text[60..90]])
}

/// Extract the chip public key from a DG14 or DG15 image.
pub fn parse_chip_key(bytes: &[u8]) -> Result<Vec<u8>, LdsError> {
    let (node, _) = tlv_decode(bytes).map_err(|_| LdsError::BadStructure("DG TLV"))?;
    node.find_value(TAG_CHIP_KEY)
        .map(|v| v.to_vec())
        .ok_or(LdsError::BadStructure("chip key object"))
}

/// Recompute every data-group hash, check the signer's signature over
/// the hash table, and chain the signer certificate to a stored root.
/// Failures are report entries, never errors.
pub fn verify_sod(lds: &LdsImage, store: &TrustStore, now: u64) -> PaReport {
    verify_sod_raw(&lds.ef_sod, &lds.data_groups, store, now)
}

/// Hash and signature verification over raw file bytes: no parsing of
/// group contents is needed (or wanted) to judge their integrity.
/// A group without a matching hash entry is unauthenticated data.
/// Security-object entries for groups that were not read (or not
/// released) are not checkable and carry no verdict.
pub fn verify_sod_raw(
    ef_sod: &EfSod,
    data_groups: &BTreeMap<u8, Vec<u8>>,
    store: &TrustStore,
    now: u64,
) -> PaReport {
    let mut dg_hash_ok = BTreeMap::new();
    for (&number, bytes) in data_groups {
        let ok = match ef_sod.hashes.get(&number) {
            Some(hash) => sha256(bytes) == *hash,
            None => false,
        };
        dg_hash_ok.insert(number, ok);
    }
    let signature_ok = ef_sod.signature_verifies();
    let chain = verify_chain(&ef_sod.ds_cert, &[], store, now);
    PaReport {
        dg_hash_ok,
        signature_ok,
        chain_ok: chain.is_ok(),
        chain_detail: match chain {
            Ok(()) => "ok".into(),
            Err(e) => e.to_string(),
        },
    }
}

/// Personalization input. Parsed from a `key: value` text file; see the
/// repository README for the exact field list.
#[derive(Debug, Clone)]
pub struct Profile {
    pub name: String,
    pub document_number: String,
    pub date_of_birth: String,
    pub date_of_expiry: String,
    pub nationality: String,
    pub issuing_state: String,
    pub document_code: String,
    pub sex: char,
    pub pin: String,
    pub can: String,
    pub face: Vec<u8>,
    pub fingerprint: Option<Vec<u8>>,
}

/// Built-in face placeholder, long enough that DG2 spans several
/// READ BINARY chunks.
pub fn default_face_placeholder() -> Vec<u8> {
    (0..600u32).map(|i| (i.wrapping_mul(7) & 0xFF) as u8).collect()
}

impl Profile {
    pub fn parse(text: &str) -> Result<Profile, LdsError> {
        let mut fields: BTreeMap<&str, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| LdsError::Profile(format!("line {}: expected `key: value`", lineno + 1)))?;
            fields.insert(
                match key.trim() {
                    "name" => "name",
                    "document_number" => "document_number",
                    "date_of_birth" => "date_of_birth",
                    "date_of_expiry" => "date_of_expiry",
                    "nationality" => "nationality",
                    "issuing_state" => "issuing_state",
                    "document_code" => "document_code",
                    "sex" => "sex",
                    "pin" => "pin",
                    "can" => "can",
                    "face_placeholder" => "face_placeholder",
                    "fingerprint_placeholder" => "fingerprint_placeholder",
                    other => return Err(LdsError::Profile(format!("unknown field {other:?}"))),
                },
                value.trim().to_string(),
            );
        }
        let required = |key: &str| -> Result<String, LdsError> {
            fields
                .get(key)
                .cloned()
                .ok_or_else(|| LdsError::Profile(format!("missing mandatory field {key:?}")))
        };
        let name = required("name")?;
        let document_number = required("document_number")?;
        let date_of_birth = required("date_of_birth")?;
        let date_of_expiry = required("date_of_expiry")?;
        let nationality = required("nationality")?;
        let sex_text = required("sex")?;
        let pin = required("pin")?;
        let can = required("can")?;
        let sex = match sex_text.as_str() {
            "M" => 'M',
            "F" => 'F',
            "<" | "" => '<',
            other => return Err(LdsError::Profile(format!("sex must be M, F or <, got {other:?}"))),
        };
        for (label, value) in [("pin", &pin), ("can", &can)] {
            if value.len() != 6 || !value.chars().all(|c| c.is_ascii_digit()) {
                return Err(LdsError::Profile(format!("{label} must be exactly six digits")));
            }
        }
        let b64 = base64::engine::general_purpose::STANDARD;
        let face = match fields.get("face_placeholder") {
            Some(encoded) => b64
                .decode(encoded)
                .map_err(|_| LdsError::Profile("face_placeholder is not valid base64".into()))?,
            None => default_face_placeholder(),
        };
        let fingerprint = match fields.get("fingerprint_placeholder") {
            Some(encoded) => Some(
                b64.decode(encoded)
                    .map_err(|_| LdsError::Profile("fingerprint_placeholder is not valid base64".into()))?,
            ),
            None => None,
        };
        Ok(Profile {
            name,
            document_number,
            date_of_birth,
            date_of_expiry,
            nationality: nationality.clone(),
            issuing_state: fields.get("issuing_state").cloned().unwrap_or(nationality),
            document_code: fields.get("document_code").cloned().unwrap_or_else(|| "ID".into()),
            sex,
            pin,
            can,
            face,
            fingerprint,
        })
    }

    /// MRZ fields with the name normalized to the `<`-separated form.
    pub fn mrz_fields(&self) -> MrzFields {
        let name = self
            .name
            .to_ascii_uppercase()
            .chars()
            .map(|c| match c {
                ' ' | ',' => '<',
                other => other,
            })
            .collect();
        MrzFields {
            document_code: self.document_code.clone(),
            issuing_state: self.issuing_state.clone(),
            document_number: self.document_number.clone(),
            optional_data: String::new(),
            date_of_birth: self.date_of_birth.clone(),
            sex: self.sex,
            date_of_expiry: self.date_of_expiry.clone(),
            nationality: self.nationality.clone(),
            optional_data2: String::new(),
            name,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cryptokit::Drbg;
    use crate::pki::{generate_root, issue, Role, FIVE_YEARS, LAB_EPOCH, TEN_YEARS};
    use hex_literal::hex;

    use crate::testutil::{sample_fields, sample_profile};

    #[test]
    fn check_digit_known_answers() {
        // Hand-computed with the 7-3-1 weights.
        assert_eq!(compute_check_digit("520727").unwrap(), 3);
        assert_eq!(compute_check_digit("<<<<<<").unwrap(), 0);
        assert_eq!(compute_check_digit("ABC123456").unwrap(), 0);
        assert_eq!(compute_check_digit("L898902C<").unwrap(), 3);
        assert_eq!(compute_check_digit("x"), Err(LdsError::Charset('x')));
    }

    #[test]
    fn check_digit_detects_all_single_substitutions() {
        // Exhaustive over a digit field. The weighted mod-10 scheme can
        // only miss substitutions whose values are congruent mod 10
        // (letter aliases such as 0 and A), which never occur inside the
        // date fields it protects.
        let field = "520727";
        let original = compute_check_digit(field).unwrap();
        for pos in 0..field.len() {
            for sub in b'0'..=b'9' {
                let mut mutated = field.as_bytes().to_vec();
                if mutated[pos] == sub {
                    continue;
                }
                mutated[pos] = sub;
                let mutated = String::from_utf8(mutated).unwrap();
                assert_ne!(
                    compute_check_digit(&mutated).unwrap(),
                    original,
                    "substitution {} at {pos} undetected",
                    sub as char
                );
            }
        }
    }

    #[test]
    fn mrz_build_parse_roundtrip() {
        let mrz = Mrz::build(&sample_fields()).unwrap();
        let lines = mrz.lines();
        assert!(lines.iter().all(|l| l.len() == 30));
        let parsed = Mrz::parse(&lines).unwrap();
        assert_eq!(parsed, mrz);
        assert_eq!(parsed.fields().document_number, "L898902C<");
    }

    #[test]
    fn mrz_detects_corrupted_document_number() {
        let mrz = Mrz::build(&sample_fields()).unwrap();
        let mut line1 = mrz.lines()[0].to_string();
        // Substitute one document-number character.
        line1.replace_range(5..6, "M");
        let err = Mrz::parse(&[&line1, mrz.lines()[1], mrz.lines()[2]]).unwrap_err();
        assert_eq!(err, LdsError::CheckDigit("document number"));
    }

    #[test]
    fn mrz_name_padded_with_fillers() {
        let mut fields = sample_fields();
        fields.name = "LI<<WEI".into();
        let mrz = Mrz::build(&fields).unwrap();
        assert_eq!(mrz.lines()[2], "LI<<WEI<<<<<<<<<<<<<<<<<<<<<<<");
    }

    #[test]
    fn bac_seed_known_answer() {
        // Worked example from the travel-document standard: the seed is
        // the truncated SHA-1 of "L898902C<369080619406236".
        let mrz = Mrz::build(&sample_fields()).unwrap();
        assert_eq!(mrz.mrz_info(), "L898902C<369080619406236");
        assert_eq!(mrz.bac_seed(), hex!("239AB9CB282DAF66231DC5A4DF6BFBAE"));
    }

    #[test]
    fn bac_seed_representation_independent() {
        let built = Mrz::build(&sample_fields()).unwrap();
        let parsed = Mrz::parse(&built.lines()).unwrap();
        assert_eq!(built.bac_seed(), parsed.bac_seed());
        assert_eq!(
            bac_seed_from_parts("L898902C", "690806", "940623").unwrap(),
            built.bac_seed()
        );
        let mut other = sample_fields();
        other.date_of_expiry = "940624".into();
        assert_ne!(Mrz::build(&other).unwrap().bac_seed(), built.bac_seed());
    }

    fn ds_material() -> (SimpleCert, EcKeyPair, TrustStore) {
        let mut rng = Drbg::from_seed(0xDEED);
        let (csca, csca_key) =
            generate_root(Role::Csca, "csca", LAB_EPOCH, LAB_EPOCH + TEN_YEARS, &mut rng).unwrap();
        let (ds, ds_key) =
            issue(&csca, &csca_key, "ds", Role::Ds, LAB_EPOCH, LAB_EPOCH + FIVE_YEARS, &mut rng)
                .unwrap();
        let mut store = TrustStore::new();
        store.add(csca).unwrap();
        (ds, ds_key, store)
    }

    #[test]
    fn minimal_profile_lists_exactly_built_groups() {
        let (ds, ds_key, _) = ds_material();
        let mut profile = sample_profile();
        profile.fingerprint = None;
        let lds = build_lds(&profile, &ds, &ds_key, None).unwrap();
        assert_eq!(lds.ef_com.dg_tags, vec![dg_tag(1), dg_tag(2)]);
        assert_eq!(lds.data_groups.len(), 2);
    }

    #[test]
    fn build_verify_untampered() {
        let (ds, ds_key, store) = ds_material();
        let mut rng = Drbg::from_seed(50);
        let keys = ChipKeys {
            chip_auth_public: EcKeyPair::generate(&mut rng).public_bytes(),
            active_auth_public: EcKeyPair::generate(&mut rng).public_bytes(),
        };
        let lds = build_lds(&sample_profile(), &ds, &ds_key, Some(&keys)).unwrap();
        assert_eq!(
            lds.ef_com.dg_tags,
            vec![dg_tag(1), dg_tag(2), dg_tag(3), dg_tag(14), dg_tag(15)]
        );
        let report = verify_sod(&lds, &store, LAB_EPOCH + 1);
        assert!(report.all_pass(), "{report:?}");
    }

    #[test]
    fn build_is_deterministic() {
        let (ds, ds_key, _) = ds_material();
        let a = build_lds(&sample_profile(), &ds, &ds_key, None).unwrap();
        let b = build_lds(&sample_profile(), &ds, &ds_key, None).unwrap();
        assert_eq!(a.ef_sod.encode(), b.ef_sod.encode());
        assert_eq!(a.data_groups, b.data_groups);
    }

    #[test]
    fn mutation_localizes_to_one_hash() {
        let (ds, ds_key, store) = ds_material();
        let mut lds = build_lds(&sample_profile(), &ds, &ds_key, None).unwrap();
        lds.data_groups.get_mut(&2).unwrap()[10] ^= 0x01;
        let report = verify_sod(&lds, &store, LAB_EPOCH + 1);
        assert!(!report.dg_hash_ok[&2]);
        assert!(report.dg_hash_ok[&1]);
        assert!(report.signature_ok, "signature covers hashes, not raw groups");
        assert!(!report.all_pass());
    }

    #[test]
    fn self_signed_ds_fails_chain() {
        let mut rng = Drbg::from_seed(51);
        let rogue_key = EcKeyPair::generate(&mut rng);
        let mut rogue = SimpleCert {
            subject: "rogue-ds".into(),
            issuer: "rogue-ds".into(),
            role: Role::Ds,
            public_key: rogue_key.public_bytes(),
            not_before: LAB_EPOCH,
            not_after: LAB_EPOCH + TEN_YEARS,
            signature: Vec::new(),
        };
        rogue.signature = crate::cryptokit::sign(&rogue_key, &rogue.body_bytes()).to_vec();
        let (_, _, store) = ds_material();
        let lds = build_lds(&sample_profile(), &rogue, &rogue_key, None).unwrap();
        let report = verify_sod(&lds, &store, LAB_EPOCH + 1);
        assert!(report.signature_ok);
        assert!(!report.chain_ok);
    }

    #[test]
    fn random_profiles_all_pass() {
        let (ds, ds_key, store) = ds_material();
        let mut rng = Drbg::from_seed(52);
        for i in 0..100 {
            let mut profile = sample_profile();
            profile.document_number = format!("X{:08}", i * 7 + 1);
            profile.date_of_birth = format!("{:02}0{}1{}", i % 99, i % 9, i % 9);
            profile.face = rng.bytes(64 + (i % 32));
            profile.fingerprint = if i % 2 == 0 { Some(rng.bytes(40)) } else { None };
            let lds = build_lds(&profile, &ds, &ds_key, None).unwrap();
            assert!(verify_sod(&lds, &store, LAB_EPOCH + 1).all_pass(), "profile {i}");
        }
    }

    #[test]
    fn sampled_bit_mutations_always_detected() {
        let (ds, ds_key, store) = ds_material();
        let lds = build_lds(&sample_profile(), &ds, &ds_key, None).unwrap();
        let mut rng = Drbg::from_seed(53);
        let numbers: Vec<u8> = lds.data_groups.keys().copied().collect();
        for _ in 0..1000 {
            let mut mutated = lds.clone();
            let dg = numbers[rng.below(numbers.len() as u64) as usize];
            let bytes = mutated.data_groups.get_mut(&dg).unwrap();
            let bit = rng.below(bytes.len() as u64 * 8) as usize;
            bytes[bit / 8] ^= 1 << (bit % 8);
            let report = verify_sod(&mutated, &store, LAB_EPOCH + 1);
            assert!(!report.dg_hash_ok[&dg]);
        }
    }

    #[test]
    fn profile_text_roundtrip() {
        let text = "\
# demo profile
name: ERIKSSON ANNA MARIA
document_number: L898902C
date_of_birth: 690806
date_of_expiry: 940623
nationality: UTO
sex: F
pin: 123456
can: 654321
fingerprint_placeholder: RklOR0VS
";
        let profile = Profile::parse(text).unwrap();
        assert_eq!(profile.document_number, "L898902C");
        assert_eq!(profile.issuing_state, "UTO");
        assert_eq!(profile.document_code, "ID");
        assert_eq!(profile.face, default_face_placeholder());
        assert_eq!(profile.fingerprint.as_deref(), Some(&b"FINGER"[..]));

        let err = Profile::parse("name: X\n").unwrap_err();
        assert!(matches!(err, LdsError::Profile(_)));

        let err = Profile::parse(&text.replace("pin: 123456", "pin: 12")).unwrap_err();
        assert!(matches!(err, LdsError::Profile(_)));
    }

    #[test]
    fn ef_structures_roundtrip() {
        let (ds, ds_key, _) = ds_material();
        let lds = build_lds(&sample_profile(), &ds, &ds_key, None).unwrap();
        assert_eq!(EfCom::decode(&lds.ef_com.encode()).unwrap(), lds.ef_com);
        assert_eq!(EfSod::decode(&lds.ef_sod.encode()).unwrap(), lds.ef_sod);
        let rebuilt = lds_from_ef_bytes(
            &lds.ef_com.encode(),
            &lds.ef_sod.encode(),
            lds.data_groups.clone(),
        )
        .unwrap();
        assert_eq!(rebuilt.mrz, lds.mrz);
    }
}
