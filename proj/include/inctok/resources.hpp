#pragma once

#include <array>
#include <string_view>

namespace inctok::resources {

// Occupation concept sets. Train and test are disjoint; the split is part of
// the method's evaluation protocol (tokens are trained on the first set and
// judged on the unseen second set).
inline constexpr std::array<std::string_view, 24> kTrainOccupations = {
    "construction worker", "mechanic", "firefighter", "police officer",
    "engineer", "pilot", "computer programmer", "ceo",
    "surgeon", "truck driver", "electrician", "scientist",
    "nurse", "teacher", "secretary", "librarian",
    "receptionist", "administrative assistant", "childcare worker", "social worker",
    "dental hygienist", "therapist", "pathologist", "nutritionist"};

inline constexpr std::array<std::string_view, 24> kTestOccupations = {
    "doctor", "chief", "farmer", "architect",
    "software developer", "ballet dancer", "yoga instructor", "cosmetologist",
    "fashion designer", "flight attendant", "artist", "musician",
    "writer", "photographer", "philosopher", "athlete",
    "lawyer", "politician", "journalist", "barista",
    "detective", "security guard", "professor", "sports coach"};

// Training prompt templates, version 1. Each has exactly one {attribute}
// slot and one {occupation} slot. A copy ships as configs/templates.v1.txt;
// the unit suite keeps file and embedded text in sync.
inline constexpr std::string_view kTemplatesVersion = "v1";

inline constexpr std::array<std::string_view, 27> kTrainingTemplates = {
    "a photo of a {attribute} {occupation}",
    "a rendering of a {attribute} {occupation}",
    "a cropped photo of the {attribute} {occupation}",
    "the photo of a {attribute} {occupation}",
    "a photo of a clean {attribute} {occupation}",
    "a photo of a dirty {attribute} {occupation}",
    "a dark photo of the {attribute} {occupation}",
    "a photo of my {attribute} {occupation}",
    "a photo of the cool {attribute} {occupation}",
    "a close-up photo of a {attribute} {occupation}",
    "a bright photo of the {attribute} {occupation}",
    "a cropped photo of a {attribute} {occupation}",
    "a photo of the {attribute} {occupation}",
    "a good photo of the {attribute} {occupation}",
    "a photo of one {attribute} {occupation}",
    "a close-up photo of the {attribute} {occupation}",
    "a rendition of the {attribute} {occupation}",
    "a photo of the clean {attribute} {occupation}",
    "a rendition of a {attribute} {occupation}",
    "a photo of a nice {attribute} {occupation}",
    "a good photo of a {attribute} {occupation}",
    "a photo of the nice {attribute} {occupation}",
    "a photo of the small {attribute} {occupation}",
    "a photo of the weird {attribute} {occupation}",
    "a photo of the large {attribute} {occupation}",
    "a photo of a cool {attribute} {occupation}",
    "a photo of a small {attribute} {occupation}"};

// Pattern used when synthesizing training candidates; {article} becomes
// "a" or "an" by the leading-vowel rule on the attribute word.
inline constexpr std::string_view kCandidatePromptPattern =
    "High-quality photo of {article} {attribute} {occupation}";

// Evaluation-time generation template (the attribute slot receives the
// inclusive placeholder) and the zero-shot classification pattern.
inline constexpr std::string_view kEvalTemplate = "a photo of a {attribute} {occupation}";
inline constexpr std::string_view kClassifierPromptPattern = "a photo of a {class} person";

// Default word the inclusive token starts from. Its embedding is the
// initial value of the trainable token.
inline constexpr std::string_view kDefaultInitWord = "individual";

}  // namespace inctok::resources
