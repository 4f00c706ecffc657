#include <algorithm>
#include <numeric>

#include "dynprompt/harness.hpp"
#include "dynprompt/rng.hpp"

namespace dynprompt {

void TaskSpec::validate() const {
  if (domains < 1 || subjects < 1 || relations < 1 || objects < 1 || facts < 1) {
    throw HarnessError("task extents must be positive");
  }
  if (facts > subjects * relations) {
    throw HarnessError("vocabulary too small: " + std::to_string(facts) + " facts per domain need that many distinct " +
                       "(subject, relation) pairs, only " + std::to_string(subjects * relations) + " exist");
  }
  if (distractors >= objects) throw HarnessError("need more objects than distractors per item");
  if (facts_per_doc < 1 || docs < 1) throw HarnessError("corpus needs at least one document of one fact");
}

std::string domain_name(std::size_t d) { return "d" + std::to_string(d); }

TaskData gen_corpus(const TaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  TaskData out;
  out.spec = spec;
  int next = kBos + 1;
  std::vector<std::vector<int>> objects_of(spec.domains);
  std::vector<std::size_t> first_fact(spec.domains + 1, 0);
  for (std::size_t d = 0; d < spec.domains; ++d) {
    const int subj0 = next;
    const int rel0 = subj0 + static_cast<int>(spec.subjects);
    const int obj0 = rel0 + static_cast<int>(spec.relations);
    next = obj0 + static_cast<int>(spec.objects);
    objects_of[d].resize(spec.objects);
    std::iota(objects_of[d].begin(), objects_of[d].end(), obj0);

    std::vector<std::pair<int, int>> pairs;
    for (std::size_t s = 0; s < spec.subjects; ++s) {
      for (std::size_t r = 0; r < spec.relations; ++r) pairs.emplace_back(subj0 + int(s), rel0 + int(r));
    }
    rng.shuffle(pairs);
    first_fact[d] = out.facts.size();
    for (std::size_t i = 0; i < spec.facts; ++i) {
      const int obj = objects_of[d][rng.below(spec.objects)];
      out.facts.push_back({pairs[i].first, pairs[i].second, obj, d});
    }
  }
  first_fact[spec.domains] = out.facts.size();
  out.vocab = static_cast<std::size_t>(next);

  for (const Fact& f : out.facts) {
    std::vector<int> pool;
    for (int o : objects_of[f.domain]) {
      if (o != f.object) pool.push_back(o);
    }
    rng.shuffle(pool);
    std::vector<int> opts{f.object};
    opts.insert(opts.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.distractors));
    rng.shuffle(opts);
    McItem item;
    item.context = TaskData::query(f);
    for (int o : opts) item.options.push_back({o});
    item.answer = static_cast<std::size_t>(std::find(opts.begin(), opts.end(), f.object) - opts.begin());
    item.domain = domain_name(f.domain);
    out.items.push_back(std::move(item));
  }

  if (spec.mixed_docs) {
    auto rel_index = [&](const Fact& f) {
      const std::size_t rel0 = 1 + f.domain * (spec.subjects + spec.relations + spec.objects) + spec.subjects;
      return static_cast<std::size_t>(f.relation) - rel0;
    };
    std::vector<std::vector<std::vector<std::size_t>>> by_rel(spec.domains,
                                                              std::vector<std::vector<std::size_t>>(spec.relations));
    for (std::size_t i = 0; i < out.facts.size(); ++i) by_rel[out.facts[i].domain][rel_index(out.facts[i])].push_back(i);
    for (std::size_t i = 0; i < spec.docs; ++i) {
      std::vector<int> doc{kBos};
      std::vector<std::optional<std::size_t>> rel(spec.domains);
      for (std::size_t k = 0; k < spec.facts_per_doc; ++k) {
        const std::size_t d = rng.below(spec.domains);
        // the first fact of a domain fixes its relation for the rest of the document
        if (!rel[d]) rel[d] = rel_index(out.facts[first_fact[d] + rng.below(spec.facts)]);
        const auto& pool = by_rel[d][*rel[d]];
        const Fact& f = out.facts[pool[rng.below(pool.size())]];
        doc.insert(doc.end(), {f.subject, f.relation, f.object});
      }
      out.corpus.push_back(std::move(doc));
    }
    return out;
  }

  // Each document packs facts of a single domain.
  for (std::size_t i = 0; i < spec.docs; ++i) {
    const std::size_t d = rng.below(spec.domains);
    std::vector<int> doc{kBos};
    for (std::size_t k = 0; k < spec.facts_per_doc; ++k) {
      const Fact& f = out.facts[first_fact[d] + rng.below(spec.facts)];
      doc.insert(doc.end(), {f.subject, f.relation, f.object});
    }
    out.corpus.push_back(std::move(doc));
  }
  return out;
}

std::vector<Example> TaskData::recall_examples(std::optional<std::size_t> domain) const {
  std::vector<Example> out;
  for (const Fact& f : facts) {
    if (domain && f.domain != *domain) continue;
    out.push_back({query(f), {kernels::kIgnoreTarget, kernels::kIgnoreTarget, f.object}, f.domain});
  }
  return out;
}

std::vector<Example> TaskData::corpus_examples() const {
  std::vector<Example> out;
  for (const auto& doc : corpus) {
    Example e{doc, std::vector<int>(doc.begin() + 1, doc.end()), 0};
    e.targets.push_back(kernels::kIgnoreTarget);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<int> TaskData::relation_tokens(std::optional<std::size_t> domain) const {
  std::vector<int> out;
  for (std::size_t d = 0; d < spec.domains; ++d) {
    if (domain && d != *domain) continue;
    const auto rel0 = static_cast<int>(1 + d * (spec.subjects + spec.relations + spec.objects) + spec.subjects);
    for (std::size_t r = 0; r < spec.relations; ++r) out.push_back(rel0 + static_cast<int>(r));
  }
  if (out.empty()) throw HarnessError("no such domain");
  return out;
}

std::vector<McItem> TaskData::items_for(std::size_t domain) const {
  std::vector<McItem> out;
  for (const auto& it : items) {
    if (it.domain == domain_name(domain)) out.push_back(it);
  }
  return out;
}

}  // namespace dynprompt
