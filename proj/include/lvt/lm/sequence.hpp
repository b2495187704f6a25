#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lvt/core/error.hpp"
#include "lvt/core/tensor.hpp"
#include "lvt/io/config.hpp"

namespace lvt {

/// Id layout: specials, then text ids, then one id per visual code.
struct Vocabulary {
  static constexpr std::size_t kPad = 0;  // also marks end of sequence
  static constexpr std::size_t kBos = 1;
  static constexpr std::size_t kImg = 2;
  static constexpr std::size_t kImgEnd = 3;
  static constexpr std::size_t kSpecials = 4;

  std::size_t text_vocab = 0;
  std::size_t codebook = 0;

  std::size_t size() const { return kSpecials + text_vocab + codebook; }
  std::size_t text_id(std::size_t t) const {
    if (t >= text_vocab) throw ValidationError("text token " + std::to_string(t) + " outside vocabulary");
    return kSpecials + t;
  }
  std::size_t visual_id(std::size_t code) const {
    if (code >= codebook) throw ValidationError("code " + std::to_string(code) + " outside codebook");
    return kSpecials + text_vocab + code;
  }
  bool is_text(std::size_t id) const { return id >= kSpecials && id < kSpecials + text_vocab; }
  bool is_visual(std::size_t id) const { return id >= kSpecials + text_vocab && id < size(); }
  std::size_t code_of(std::size_t id) const { return id - kSpecials - text_vocab; }
  std::size_t text_of(std::size_t id) const { return id - kSpecials; }

  static Vocabulary from(const Config& cfg) { return {cfg.lm.text_vocab, cfg.tokenizer.codebook_size}; }
};

enum class Order { ImageFirst, TextFirst };

/// Visual content of one image as the LM sees it.
template <class S>
struct ImageTokens {
  std::vector<std::size_t> codes;
  Tensor<S> features;  // [T × D] continuous merger outputs, row k for codes[k]
};

/// Token ids plus the optional continuous inputs at visual positions.
/// loss_mask[i] = 1 means ids[i] is a prediction target given ids[0..i).
template <class S>
struct MultimodalSequence {
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::size_t> visual_positions;
  Tensor<S> visual_features;  // [T × D], aligned with visual_positions
  bool continuous = false;    // inputs at visual positions come from visual_features
  std::optional<Order> order;

  std::size_t size() const { return ids.size(); }
  // Positions that receive continuous inputs (empty in quantized mode).
  std::vector<std::size_t> override_positions() const { return continuous ? visual_positions : std::vector<std::size_t>{}; }
};

struct SequenceOptions {
  LossScope scope = LossScope::All;
  bool supervise_specials = true;
  bool terminate = false;  // append the end marker as a final target
};

/// image-first: [BOS][IMG] v.. [/IMG] t..   text-first: [BOS] t.. [IMG] v.. [/IMG]
/// Continuous inputs are used only in image-first order.
template <class S>
MultimodalSequence<S> build_sequence(const Vocabulary& vocab, const ImageTokens<S>* image,
                                     const std::vector<std::size_t>& text, Order order, InputMode input_mode,
                                     const SequenceOptions& opt = {}) {
  if (!image && text.empty()) throw ValidationError("build_sequence: empty inputs");
  if (image && image->codes.empty()) throw ValidationError("build_sequence: image with T = 0");
  if (image && image->features.size() != 0 && image->features.rows() != image->codes.size())
    throw DimensionError("build_sequence: " + std::to_string(image->codes.size()) + " codes but features " +
                         shape_str(image->features.shape()));
  MultimodalSequence<S> seq;
  // segment 0 = prompt side, 1 = response side
  std::vector<int> seg;
  std::vector<bool> special;
  auto push = [&](std::size_t id, int s, bool sp) {
    seq.ids.push_back(id);
    seg.push_back(s);
    special.push_back(sp);
  };
  auto push_image = [&](int s) {
    push(Vocabulary::kImg, s, true);
    for (auto c : image->codes) {
      seq.visual_positions.push_back(seq.ids.size());
      push(vocab.visual_id(c), s, false);
    }
    push(Vocabulary::kImgEnd, s, true);
  };
  auto push_text = [&](int s) {
    for (auto t : text) push(vocab.text_id(t), s, false);
  };
  push(Vocabulary::kBos, 0, true);
  if (!image) {
    push_text(1);
  } else if (text.empty()) {
    push_image(1);
    seq.order = order;
  } else {
    seq.order = order;
    if (order == Order::ImageFirst) {
      push_image(0);
      push_text(1);
    } else {
      push_text(0);
      push_image(1);
    }
  }
  if (opt.terminate) push(Vocabulary::kPad, 1, true);
  seq.loss_mask.assign(seq.ids.size(), 0);
  for (std::size_t i = 1; i < seq.ids.size(); ++i) {
    bool on = opt.scope == LossScope::All || seg[i] == 1;
    if (special[i] && !opt.supervise_specials && seq.ids[i] != Vocabulary::kPad) on = false;
    seq.loss_mask[i] = on ? 1 : 0;
  }
  if (image) {
    seq.visual_features = image->features;
    seq.continuous = input_mode == InputMode::Continuous && image->features.size() != 0 &&
                     (order == Order::ImageFirst || text.empty());
  }
  return seq;
}

}  // namespace lvt
