#ifndef EMERFLOW_SERIALIZE_HPP
#define EMERFLOW_SERIALIZE_HPP

#include <string>
#include <vector>

#include "emerflow/augment.hpp"
#include "emerflow/common.hpp"
#include "emerflow/corpus.hpp"

namespace emerflow {

struct SerializedText {
    std::string item_id;
    std::string text;
};

enum class SerializeMode { full, raw_only, augmented_only };

inline SerializeMode serialize_mode_from_string(const std::string& s) {
    if (s == "full") return SerializeMode::full;
    if (s == "raw_only") return SerializeMode::raw_only;
    if (s == "augmented_only") return SerializeMode::augmented_only;
    fail("unknown serialize mode `" + s + "` (expected full|raw_only|augmented_only)");
}

inline std::string to_string(SerializeMode mode) {
    switch (mode) {
        case SerializeMode::full: return "full";
        case SerializeMode::raw_only: return "raw_only";
        case SerializeMode::augmented_only: return "augmented_only";
    }
    return "full";
}

// `<name>: content`, exactly. Contents are free text; no escaping.
inline std::string serialize_feature(const FeatureValue& f) {
    if (f.name.empty()) fail("serialize_feature: feature name must be non-empty");
    return "<" + f.name + ">: " + f.content;
}

// Raw features first, then augmented, joined by "; ". raw_only and
// augmented_only are the two feature-source ablations. The character cap
// truncates at a feature boundary; a lone oversized feature is hard-capped
// so the result is never empty.
inline SerializedText serialize_item(const Item& item, const AugmentedFeatureSet* augmented,
                                     SerializeMode mode, std::size_t max_chars = 4096) {
    if (mode == SerializeMode::augmented_only && augmented == nullptr)
        fail("serialize_item: augmented_only mode requires augmented features for item " + item.id);

    std::vector<const FeatureValue*> parts;
    if (mode != SerializeMode::augmented_only)
        for (const auto& f : item.features) parts.push_back(&f);
    if (mode != SerializeMode::raw_only && augmented != nullptr)
        for (const auto& f : augmented->features) parts.push_back(&f);
    if (parts.empty())
        fail("serialize_item: no features to serialize for item " + item.id + " in mode " +
             to_string(mode));

    std::string text;
    for (const FeatureValue* f : parts) {
        const std::string piece = serialize_feature(*f);
        if (text.empty()) {
            text = piece;
            continue;
        }
        if (text.size() + 2 + piece.size() > max_chars) break;
        text += "; ";
        text += piece;
    }
    if (text.size() > max_chars) text.resize(max_chars);
    return {item.id, text};
}

inline void write_serialized_dump(const std::string& path,
                                  const std::vector<SerializedText>& texts) {
    std::string out;
    for (const auto& s : texts) {
        nlohmann::ordered_json j;
        j["item_id"] = s.item_id;
        j["text"] = s.text;
        out += j.dump();
        out += '\n';
    }
    write_text_file(path, out);
}

}  // namespace emerflow

#endif  // EMERFLOW_SERIALIZE_HPP
